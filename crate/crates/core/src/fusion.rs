//! Softmax-weighted fusion of frozen per-layer logits, and the Best Pred
//! baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Shape4, Tensor4};
use crate::training::count_correct;

/// `L` learnable scalars; the fusion weights are `softmax(α)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub alpha: Vec<f64>,
}

fn softmax(alpha: &[f64]) -> Vec<f64> {
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl FusionHead {
    /// Uniform weights.
    pub fn new(layers: usize) -> Self {
        FusionHead {
            alpha: vec![0.0; layers],
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.alpha)
    }

    pub fn num_params(&self) -> usize {
        self.alpha.len()
    }
}

fn check_stack(stack: &[Tensor4], layers: usize) -> Result<Shape4> {
    if stack.len() != layers {
        return Err(Error::shape("fuse", "layer count", layers, stack.len()));
    }
    let shape = stack.first().ok_or_else(|| Error::invalid("fuse", "empty logit stack"))?.shape();
    for t in stack {
        if t.shape() != shape {
            return Err(Error::shape("fuse", "logit shape", shape.numel(), t.len()));
        }
    }
    Ok(shape)
}

/// `Σ_l w_l ŷ_l`.
pub fn fuse(stack: &[Tensor4], head: &FusionHead) -> Result<Tensor4> {
    let shape = check_stack(stack, head.alpha.len())?;
    let w = head.weights();
    let mut out = Tensor4::zeros(shape);
    for (t, &wl) in stack.iter().zip(&w) {
        for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += wl * v;
        }
    }
    Ok(out)
}

/// Cross-entropy of the fused logits and its gradient with respect to `α`.
pub fn fusion_loss_grad(stack: &[Tensor4], labels: &[usize], head: &FusionHead) -> Result<(f64, Vec<f64>)> {
    let fused = fuse(stack, head)?;
    let (loss, probs) = ops::softmax_cross_entropy(&fused, labels)?;
    let b = fused.shape().b;
    let k = fused.shape().per_sample();
    let mut upstream = probs;
    for (i, &y) in labels.iter().enumerate() {
        upstream.data_mut()[i * k + y] -= 1.0;
    }
    let gw: Vec<f64> = stack
        .iter()
        .map(|t| t.data().iter().zip(upstream.data()).map(|(a, g)| a * g).sum::<f64>() / b as f64)
        .collect();
    let w = head.weights();
    let dot: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
    let ga = w.iter().zip(&gw).map(|(wj, gj)| wj * (gj - dot)).collect();
    Ok((loss, ga))
}

/// Full-batch Adam on `α` over cached logits, starting from zero.
pub fn train_fusion(stack: &[Tensor4], labels: &[usize], epochs: usize, lr: f64) -> Result<FusionHead> {
    let mut head = FusionHead::new(stack.len());
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; stack.len()];
    let mut v = vec![0.0; stack.len()];
    for t in 1..=epochs {
        let (_, g) = fusion_loss_grad(stack, labels, &head)?;
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for j in 0..head.alpha.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            head.alpha[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(head)
}

/// Index of the most accurate layer; ties go to the deeper layer.
pub fn best_layer(per_layer_acc: &[f64]) -> Result<usize> {
    if per_layer_acc.is_empty() {
        return Err(Error::invalid("best_pred", "empty accuracy table"));
    }
    let mut best = 0;
    for (l, &a) in per_layer_acc.iter().enumerate() {
        if a >= per_layer_acc[best] {
            best = l;
        }
    }
    Ok(best)
}

/// Predicted classes from the best layer's logits.
pub fn best_pred(per_layer_acc: &[f64], stack: &[Tensor4]) -> Result<(usize, Vec<usize>)> {
    let l = best_layer(per_layer_acc)?;
    check_stack(stack, per_layer_acc.len())?;
    Ok((l, predictions(&stack[l])))
}

pub fn predictions(logits: &Tensor4) -> Vec<usize> {
    (0..logits.shape().b)
        .map(|b| {
            let row = logits.sample(b);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy in percent.
pub fn top1(logits: &Tensor4, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    100.0 * count_correct(logits, labels) as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::lcg_tensor;

    fn stack(layers: usize, b: usize, k: usize, seed: u64) -> Vec<Tensor4> {
        (0..layers).map(|l| lcg_tensor(Shape4::matrix(b, k), seed + l as u64)).collect()
    }

    #[test]
    fn uniform_alpha_is_mean() {
        let s = stack(3, 4, 5, 1);
        let f = fuse(&s, &FusionHead::new(3)).unwrap();
        for i in 0..f.len() {
            let mean = (s[0].data()[i] + s[1].data()[i] + s[2].data()[i]) / 3.0;
            assert!((f.data()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_alpha_selects_layer() {
        let s = stack(3, 4, 5, 2);
        let head = FusionHead {
            alpha: vec![0.0, 800.0, 0.0],
        };
        assert!(fuse(&s, &head).unwrap().max_abs_diff(&s[1]) < 1e-12);
    }

    #[test]
    fn weighted_sum_oracle_and_missing_layer() {
        let s = stack(4, 3, 6, 3);
        let head = FusionHead {
            alpha: vec![0.3, -1.2, 2.0, 0.1],
        };
        let z: f64 = head.alpha.iter().map(|a| a.exp()).sum();
        let f = fuse(&s, &head).unwrap();
        for i in 0..f.len() {
            let want: f64 = (0..4).map(|l| head.alpha[l].exp() / z * s[l].data()[i]).sum();
            assert!((f.data()[i] - want).abs() <= 1e-12);
        }
        assert!(fuse(&s[..3], &head).is_err());
        let w = head.weights();
        assert!(w.iter().all(|&v| v > 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let s = stack(3, 5, 4, 4);
        let y = [0, 3, 1, 2, 2];
        let head = FusionHead {
            alpha: vec![0.2, -0.4, 0.7],
        };
        let (_, g) = fusion_loss_grad(&s, &y, &head).unwrap();
        for j in 0..3 {
            let mut up = head.clone();
            up.alpha[j] += 1e-6;
            let mut dn = head.clone();
            dn.alpha[j] -= 1e-6;
            let num = (fusion_loss_grad(&s, &y, &up).unwrap().0 - fusion_loss_grad(&s, &y, &dn).unwrap().0) / 2e-6;
            assert!((num - g[j]).abs() < 1e-8, "{num} vs {}", g[j]);
        }
    }

    #[test]
    fn dominant_layer_wins() {
        let y: Vec<usize> = (0..40).map(|i| (i * 7) % 4).collect();
        let mut s = stack(4, 40, 4, 5);
        s[2] = Tensor4::from_fn(Shape4::matrix(40, 4), |b, k, _, _| if k == y[b] { 6.0 } else { 0.0 });
        let neff = |epochs| {
            let w = train_fusion(&s, &y, epochs, 0.01).unwrap().weights();
            assert_eq!(crate::fusion::best_layer(&w).unwrap(), 2, "{w:?}");
            crate::diagnostics::n_eff(&w).unwrap()
        };
        let (a, b, c) = (neff(100), neff(500), neff(5000));
        assert!(a > b && b > c, "{a} {b} {c}");
        assert!(c < 1.1, "{c}");
    }

    #[test]
    fn identical_layers_keep_alpha() {
        let one = lcg_tensor(Shape4::matrix(10, 3), 6);
        let s = vec![one.clone(), one.clone(), one];
        let y: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let (_, g) = fusion_loss_grad(&s, &y, &FusionHead::new(3)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let head = train_fusion(&s, &y, 50, 0.01).unwrap();
        assert!(head.alpha.iter().all(|a| a.abs() < 1e-9));
    }

    #[test]
    fn fused_ce_not_worse_than_best_layer() {
        let y: Vec<usize> = (0..60).map(|i| (i * 5) % 3).collect();
        let s: Vec<Tensor4> = (0..4)
            .map(|l| {
                let noise = lcg_tensor(Shape4::matrix(60, 3), 20 + l);
                Tensor4::from_fn(noise.shape(), |b, k, _, _| {
                    noise.at(b, k, 0, 0) * 2.0 + if k == y[b] { 0.5 * l as f64 } else { 0.0 }
                })
            })
            .collect();
        let head = train_fusion(&s, &y, 500, 0.01).unwrap();
        let fused = ops::softmax_cross_entropy(&fuse(&s, &head).unwrap(), &y).unwrap().0;
        let best = s
            .iter()
            .map(|t| ops::softmax_cross_entropy(t, &y).unwrap().0)
            .fold(f64::INFINITY, f64::min);
        assert!(fused <= best + 1e-3, "{fused} vs {best}");
    }

    #[test]
    fn best_pred_rules() {
        assert_eq!(best_layer(&[10.0, 50.0, 30.0]).unwrap(), 1);
        assert_eq!(best_layer(&[50.0, 50.0]).unwrap(), 1);
        let s = stack(3, 6, 4, 7);
        let acc = [10.0, 50.0, 30.0];
        let (l, p) = best_pred(&acc, &s).unwrap();
        let scaled: Vec<Tensor4> = s.iter().map(|t| t.map(|v| v * 3.5)).collect();
        let (l2, p2) = best_pred(&acc, &scaled).unwrap();
        assert_eq!((l, p), (l2, p2));
    }
}
