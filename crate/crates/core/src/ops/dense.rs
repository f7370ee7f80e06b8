use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub struct LinearGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Tensor4,
}

/// `y = x Wᵀ + b` with `x` viewed as `(B, D)`, `W` as `(K, D)`, `b` as `K`.
pub fn linear_forward(input: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>) -> Result<Tensor4> {
    let (batch, d) = (input.shape().b, input.shape().per_sample());
    let k = weight.shape().b;
    if weight.shape().per_sample() != d {
        return Err(Error::shape("linear", "input features", weight.shape().per_sample(), d));
    }
    let mut out = Tensor4::zeros(Shape4::matrix(batch, k));
    if let Some(bias) = bias {
        if bias.len() != k {
            return Err(Error::shape("linear", "bias length", k, bias.len()));
        }
        for row in out.data_mut().chunks_exact_mut(k) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(batch, d, k, input.data(), false, weight.data(), true, 1.0, out.data_mut());
    Ok(out)
}

pub fn linear_backward(input: &Tensor4, weight: &Tensor4, upstream: &Tensor4) -> LinearGrads {
    let (batch, d) = (input.shape().b, input.shape().per_sample());
    let k = weight.shape().b;
    let mut gx = Tensor4::zeros(input.shape());
    let mut gw = Tensor4::zeros(weight.shape());
    let mut gb = Tensor4::zeros(Shape4::new(1, k, 1, 1));
    gemm(batch, k, d, upstream.data(), false, weight.data(), false, 0.0, gx.data_mut());
    gemm(k, batch, d, upstream.data(), true, input.data(), false, 0.0, gw.data_mut());
    for row in upstream.data().chunks_exact(k) {
        for (g, v) in gb.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Row-wise softmax of a `(B, K)` matrix, max-shifted.
pub fn softmax_rows(logits: &Tensor4) -> Tensor4 {
    let k = logits.shape().per_sample();
    let mut p = logits.clone();
    for row in p.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// Mean cross-entropy over the batch; returns `(loss, probabilities)`.
///
/// The gradient wrt the logits is `(p - onehot(y)) / B`.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let (batch, k) = (logits.shape().b, logits.shape().per_sample());
    if labels.len() != batch {
        return Err(Error::shape("cross_entropy", "label count", batch, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    Ok((loss / batch as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readout_arithmetic() {
        let g = Tensor4::from_vec(Shape4::matrix(1, 1), vec![3.0]).unwrap();
        let w = Tensor4::from_vec(Shape4::matrix(2, 1), vec![2.0, -1.0]).unwrap();
        let b = Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![0.5, 0.0]).unwrap();
        assert_eq!(linear_forward(&g, &w, Some(&b)).unwrap().data(), &[6.5, -3.0]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let z = Tensor4::zeros(Shape4::matrix(3, 7));
        let (loss, p) = softmax_cross_entropy(&z, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-15);
        assert!(p.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn label_out_of_range() {
        let z = Tensor4::zeros(Shape4::matrix(1, 3));
        assert!(softmax_cross_entropy(&z, &[3]).is_err());
    }
}
