//! Oracles shared by unit tests. Kept independent of the kernels they check.

use crate::tensor::{Shape4, Tensor4};

/// Deterministic pseudo-random tensor with entries in `[-1, 1)`.
pub fn lcg_tensor(shape: Shape4, seed: u64) -> Tensor4 {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor4::from_fn(shape, |_, _, _, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Six nested loops over the definition of a padded 3×3 cross-correlation.
pub fn naive_conv(x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Tensor4 {
    let (s, sw) = (x.shape(), w.shape());
    Tensor4::from_fn(Shape4::new(s.b, sw.b, s.h, s.w), |n, co, y, xx| {
        let mut acc = b.data()[co];
        for ci in 0..s.c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                    if sy >= 0 && sx >= 0 && (sy as usize) < s.h && (sx as usize) < s.w {
                        acc += w.at(co, ci, ky, kx) * x.at(n, ci, sy as usize, sx as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff(f: &impl Fn(&Tensor4) -> f64, x: &Tensor4, h: f64) -> Tensor4 {
    let mut g = Tensor4::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, tiny)` must be below `tol`.
pub fn assert_grad_close(analytic: &Tensor4, numeric: &Tensor4, tol: f64) {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt()).max(1e-12);
    assert!(diff / scale < tol, "relative gradient error {} >= {tol}", diff / scale);
}
