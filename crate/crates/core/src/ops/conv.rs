use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

const K: usize = 3;
const TAPS: usize = K * K;

pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Tensor4,
}

fn check_conv(input: Shape4, weight: Shape4, bias: Shape4) -> Result<()> {
    if weight.h != K || weight.w != K {
        return Err(Error::shape("conv2d", "kernel size", K, if weight.h != K { weight.h } else { weight.w }));
    }
    if input.c != weight.c {
        return Err(Error::shape("conv2d", "input channels", weight.c, input.c));
    }
    if bias.numel() != weight.b {
        return Err(Error::shape("conv2d", "bias length", weight.b, bias.numel()));
    }
    Ok(())
}

/// Lowers one `(C, H, W)` sample into `(C·9, H·W)` patch columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[(ci * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch columns back onto a `(C, H, W)` sample.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, x: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[(ci * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// 3×3 cross-correlation, zero padding 1, stride 1.
///
/// `weight` is `(C_out, C_in, 3, 3)`, `bias` holds `C_out` entries.
pub fn conv2d_forward(input: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    let (si, sw) = (input.shape(), weight.shape());
    check_conv(si, sw, bias.shape())?;
    let (c_out, hw) = (sw.b, si.spatial());
    let kdim = si.c * TAPS;
    let mut out = Tensor4::zeros(Shape4::new(si.b, c_out, si.h, si.w));
    let mut cols = vec![0.0; kdim * hw];
    for b in 0..si.b {
        im2col(input.sample(b), si.c, si.h, si.w, &mut cols);
        let dst = out.sample_mut(b);
        for (co, row) in dst.chunks_exact_mut(hw).enumerate() {
            row.fill(bias.data()[co]);
        }
        gemm(c_out, kdim, hw, weight.data(), false, &cols, false, 1.0, dst);
    }
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] given the forward input.
pub fn conv2d_backward(input: &Tensor4, weight: &Tensor4, upstream: &Tensor4) -> Result<ConvGrads> {
    let (si, sw) = (input.shape(), weight.shape());
    let c_out = sw.b;
    let expect = Shape4::new(si.b, c_out, si.h, si.w);
    if upstream.shape() != expect {
        return Err(Error::shape("conv2d_backward", "upstream numel", expect.numel(), upstream.len()));
    }
    let hw = si.spatial();
    let kdim = si.c * TAPS;
    let mut gx = Tensor4::zeros(si);
    let mut gw = Tensor4::zeros(sw);
    let mut gb = Tensor4::zeros(Shape4::new(1, c_out, 1, 1));
    let mut cols = vec![0.0; kdim * hw];
    let mut gcols = vec![0.0; kdim * hw];
    for b in 0..si.b {
        let gy = upstream.sample(b);
        for (co, row) in gy.chunks_exact(hw).enumerate() {
            gb.data_mut()[co] += row.iter().sum::<f64>();
        }
        im2col(input.sample(b), si.c, si.h, si.w, &mut cols);
        gemm(c_out, hw, kdim, gy, false, &cols, true, 1.0, gw.data_mut());
        gemm(kdim, c_out, hw, weight.data(), true, gy, false, 0.0, &mut gcols);
        col2im(&gcols, si.c, si.h, si.w, gx.sample_mut(b));
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Per-pixel channel mixing: `(B, C, H, W)` × `(N, C)` → `(B, N, H, W)`.
///
/// Equivalent to a bias-free 1×1 convolution.
pub fn channel_project_forward(input: &Tensor4, proj: &Tensor4) -> Result<Tensor4> {
    let si = input.shape();
    let n = proj.shape().b;
    if proj.shape().per_sample() != si.c {
        return Err(Error::shape("channel_project", "projection columns", si.c, proj.shape().per_sample()));
    }
    let hw = si.spatial();
    let mut out = Tensor4::zeros(Shape4::new(si.b, n, si.h, si.w));
    for b in 0..si.b {
        gemm(n, si.c, hw, proj.data(), false, input.sample(b), false, 0.0, out.sample_mut(b));
    }
    Ok(out)
}

/// Returns `(grad_input, grad_proj)`.
pub fn channel_project_backward(input: &Tensor4, proj: &Tensor4, upstream: &Tensor4) -> (Tensor4, Tensor4) {
    let si = input.shape();
    let n = proj.shape().b;
    let hw = si.spatial();
    let mut gx = Tensor4::zeros(si);
    let mut gp = Tensor4::zeros(proj.shape());
    for b in 0..si.b {
        let gy = upstream.sample(b);
        gemm(n, hw, si.c, gy, false, input.sample(b), true, 1.0, gp.data_mut());
        gemm(si.c, n, hw, proj.data(), true, gy, false, 0.0, gx.sample_mut(b));
    }
    (gx, gp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{lcg_tensor, naive_conv};

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        let w = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        let b = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = lcg_tensor(Shape4::new(2, 1, 4, 5), 3);
        let mut w = Tensor4::zeros(Shape4::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d_forward(&x, &w, &Tensor4::zeros(Shape4::new(1, 1, 1, 1))).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn matches_loop_oracle() {
        let x = lcg_tensor(Shape4::new(2, 3, 5, 5), 11);
        let w = lcg_tensor(Shape4::new(4, 3, 3, 3), 12);
        let b = lcg_tensor(Shape4::new(1, 4, 1, 1), 13);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &w, &b)) <= 1e-12);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor4::zeros(Shape4::new(1, 2, 4, 4));
        let w = Tensor4::zeros(Shape4::new(1, 3, 3, 3));
        let b = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        let err = conv2d_forward(&x, &w, &b).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w5 = Tensor4::zeros(Shape4::new(1, 2, 5, 5));
        let err = conv2d_forward(&x, &w5, &b).unwrap_err().to_string();
        assert!(err.contains("kernel size"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = lcg_tensor(Shape4::new(1, 2, 4, 4), 5);
        let w = lcg_tensor(Shape4::new(3, 2, 3, 3), 6);
        let g = conv2d_backward(&x, &w, &Tensor4::zeros(Shape4::new(1, 3, 4, 4))).unwrap();
        assert!(g.input.is_all_zero() && g.weight.is_all_zero() && g.bias.is_all_zero());
    }

    #[test]
    fn identity_kernel_input_grad_counts_covering_taps() {
        // With loss = sum(output) and a kernel of ones, d/dx counts how many
        // output windows cover each input position.
        let x = lcg_tensor(Shape4::new(1, 1, 3, 3), 7);
        let w = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        let g = conv2d_backward(&x, &w, &Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0)).unwrap();
        assert_eq!(g.input.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        // identity kernel: each input position feeds exactly one output through the centre tap
        let mut id = Tensor4::zeros(Shape4::new(1, 1, 3, 3));
        id.set(0, 0, 1, 1, 1.0);
        let g = conv2d_backward(&x, &id, &Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0)).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 1.0));
    }
}
