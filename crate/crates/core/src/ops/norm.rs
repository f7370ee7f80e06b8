use crate::tensor::{Shape4, Tensor4};

/// Denominator guard of [`rms_norm_forward`].
pub const RMS_NORM_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;

/// Per-sample `x / (sqrt(mean(x²)) + ε)` over channels and space.
///
/// Returns the output and the per-sample root-mean-square.
pub fn rms_norm_forward(x: &Tensor4) -> (Tensor4, Vec<f64>) {
    let s = x.shape();
    let n = s.per_sample();
    let mut out = x.clone();
    let mut rms = Vec::with_capacity(s.b);
    for b in 0..s.b {
        let row = out.sample_mut(b);
        let r = (row.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let inv = 1.0 / (r + RMS_NORM_EPS);
        row.iter_mut().for_each(|v| *v *= inv);
        rms.push(r);
    }
    (out, rms)
}

pub fn rms_norm_backward(x: &Tensor4, rms: &[f64], upstream: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let n = s.per_sample() as f64;
    let mut g = Tensor4::zeros(s);
    for b in 0..s.b {
        let (xs, gy) = (x.sample(b), upstream.sample(b));
        let r = rms[b];
        let d = r + RMS_NORM_EPS;
        let dot: f64 = xs.iter().zip(gy).map(|(a, c)| a * c).sum();
        // d r / d x_i = x_i / (n r); zero input has zero dot, so the r = 0 branch is moot
        let coef = if r > 0.0 { dot / (d * d * r * n) } else { 0.0 };
        for ((gv, &xv), &gyv) in g.sample_mut(b).iter_mut().zip(xs).zip(gy) {
            *gv = gyv / d - xv * coef;
        }
    }
    g
}

/// Saved state of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormTrace {
    pub normalized: Tensor4,
    pub inv_std: Vec<f64>,
}

/// Affine-free batch norm over `(B, H, W)` per channel.
///
/// Updates `running_mean` / `running_var` (unbiased) with `momentum`.
pub fn batch_norm_train(
    x: &Tensor4,
    running_mean: &mut [f64],
    running_var: &mut [f64],
    momentum: f64,
) -> (Tensor4, BatchNormTrace) {
    let s = x.shape();
    let hw = s.spatial();
    let count = (s.b * hw) as f64;
    let mut out = Tensor4::zeros(s);
    let mut inv_std = vec![0.0; s.c];
    for c in 0..s.c {
        let mut mean = 0.0;
        for b in 0..s.b {
            mean += x.sample(b)[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..s.b {
            var += x.sample(b)[c * hw..(c + 1) * hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= count;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = inv;
        for b in 0..s.b {
            let src = &x.sample(b)[c * hw..(c + 1) * hw];
            let dst = &mut out.sample_mut(b)[c * hw..(c + 1) * hw];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * inv;
            }
        }
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    }
    (
        out.clone(),
        BatchNormTrace {
            normalized: out,
            inv_std,
        },
    )
}

pub fn batch_norm_eval(x: &Tensor4, running_mean: &[f64], running_var: &[f64]) -> Tensor4 {
    let s = x.shape();
    let hw = s.spatial();
    let mut out = x.clone();
    for b in 0..s.b {
        for (c, plane) in out.sample_mut(b).chunks_exact_mut(hw).enumerate() {
            let inv = 1.0 / (running_var[c] + BN_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - running_mean[c]) * inv);
        }
    }
    out
}

pub fn batch_norm_backward(trace: &BatchNormTrace, upstream: &Tensor4) -> Tensor4 {
    let s: Shape4 = upstream.shape();
    let hw = s.spatial();
    let count = (s.b * hw) as f64;
    let mut g = Tensor4::zeros(s);
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..s.b {
            let gy = &upstream.sample(b)[c * hw..(c + 1) * hw];
            let xh = &trace.normalized.sample(b)[c * hw..(c + 1) * hw];
            sum_g += gy.iter().sum::<f64>();
            sum_gx += gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
        let inv = trace.inv_std[c];
        for b in 0..s.b {
            let gy = &upstream.sample(b)[c * hw..(c + 1) * hw];
            let xh = &trace.normalized.sample(b)[c * hw..(c + 1) * hw];
            let dst = &mut g.sample_mut(b)[c * hw..(c + 1) * hw];
            for ((d, &gyv), &xv) in dst.iter_mut().zip(gy).zip(xh) {
                *d = inv * (gyv - sum_g / count - xv * sum_gx / count);
            }
        }
    }
    g
}
