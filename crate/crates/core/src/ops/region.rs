use super::partition::region_partition;
use crate::error::Result;
use crate::tensor::{Shape4, Tensor4};

/// Region-averaged squared energy: `(B, C, H, W)` → `(B, C·s², 1, 1)`.
///
/// Output index is `c·s² + i·s + j`, i.e. channel outer, then region row,
/// then region column. Sums are accumulated in 64-bit.
pub fn region_energy(x: &Tensor4, s: usize) -> Result<Tensor4> {
    let sh = x.shape();
    let regions = region_partition(sh.h, sh.w, s)?;
    let per = sh.c * regions.len();
    let mut out = Tensor4::zeros(Shape4::matrix(sh.b, per));
    let hw = sh.spatial();
    let od = out.data_mut();
    for (plane_idx, plane) in x.data().chunks_exact(hw).enumerate() {
        let base = plane_idx * regions.len();
        for (r_idx, r) in regions.iter().enumerate() {
            let mut acc = 0.0;
            for y in r.rows.0..r.rows.1 {
                for v in &plane[y * sh.w + r.cols.0..y * sh.w + r.cols.1] {
                    acc += v * v;
                }
            }
            od[base + r_idx] = acc / r.area() as f64;
        }
    }
    Ok(out)
}

/// `dx = dy_region · 2x / |R|`.
pub fn region_energy_backward(x: &Tensor4, s: usize, upstream: &Tensor4) -> Result<Tensor4> {
    let sh = x.shape();
    let regions = region_partition(sh.h, sh.w, s)?;
    let hw = sh.spatial();
    let mut g = Tensor4::zeros(sh);
    let gu = upstream.data();
    for (plane_idx, (gp, xp)) in g.data_mut().chunks_exact_mut(hw).zip(x.data().chunks_exact(hw)).enumerate() {
        let base = plane_idx * regions.len();
        for (r_idx, r) in regions.iter().enumerate() {
            let k = 2.0 * gu[base + r_idx] / r.area() as f64;
            for y in r.rows.0..r.rows.1 {
                let span = y * sh.w + r.cols.0..y * sh.w + r.cols.1;
                for (gv, xv) in gp[span.clone()].iter_mut().zip(&xp[span]) {
                    *gv = k * xv;
                }
            }
        }
    }
    Ok(g)
}
