use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Clamp on the pooled RMS used as the backward denominator.
pub const RMS_POOL_EPS: f64 = 1e-12;

fn check_even(op: &'static str, s: Shape4) -> Result<()> {
    if !s.h.is_multiple_of(2) {
        return Err(Error::invalid(op, format!("odd height {}", s.h)));
    }
    if !s.w.is_multiple_of(2) {
        return Err(Error::invalid(op, format!("odd width {}", s.w)));
    }
    Ok(())
}

fn pool2x2(x: &Tensor4, op: &'static str, f: impl Fn([f64; 4]) -> f64) -> Result<Tensor4> {
    let s = x.shape();
    check_even(op, s)?;
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(Shape4::new(s.b, s.c, oh, ow));
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for plane in 0..s.b * s.c {
        let base = plane * s.h * s.w;
        for y in 0..oh {
            let r0 = base + 2 * y * s.w;
            let r1 = r0 + s.w;
            for xo in 0..ow {
                dst[k] = f([src[r0 + 2 * xo], src[r0 + 2 * xo + 1], src[r1 + 2 * xo], src[r1 + 2 * xo + 1]]);
                k += 1;
            }
        }
    }
    Ok(out)
}

/// 2×2, stride-2 pooling by root-mean-square of each window.
pub fn rms_pool(x: &Tensor4) -> Result<Tensor4> {
    pool2x2(x, "rms_pool", |r| ((r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]) / 4.0).sqrt())
}

/// `dx = dy · x / (4 · max(y, ε))`.
pub fn rms_pool_backward(x: &Tensor4, y: &Tensor4, upstream: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut g = Tensor4::zeros(s);
    let (xs, ys, gy) = (x.data(), y.data(), upstream.data());
    let gd = g.data_mut();
    for plane in 0..s.b * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (plane * oh + oy) * ow + ox;
                let k = gy[o] / (4.0 * ys[o].max(RMS_POOL_EPS));
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        gd[i] = xs[i] * k;
                    }
                }
            }
        }
    }
    g
}

pub fn avg_pool_2x2(x: &Tensor4) -> Result<Tensor4> {
    pool2x2(x, "avg_pool_2x2", |r| (r[0] + r[1] + r[2] + r[3]) / 4.0)
}

pub fn avg_pool_2x2_backward(input_shape: Shape4, upstream: &Tensor4) -> Tensor4 {
    Tensor4::from_fn(input_shape, |b, c, h, w| upstream.at(b, c, h / 2, w / 2) / 4.0)
}

/// `(B, C, H, W)` → `(B, C, 1, 1)` spatial mean.
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let hw = s.spatial();
    let data = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor4::from_raw(Shape4::new(s.b, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward(input_shape: Shape4, upstream: &Tensor4) -> Tensor4 {
    let hw = input_shape.spatial();
    let mut g = Tensor4::zeros(input_shape);
    for (plane, &v) in g.data_mut().chunks_exact_mut(hw).zip(upstream.data()) {
        plane.fill(v / hw as f64);
    }
    g
}
