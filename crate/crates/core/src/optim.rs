//! Per-group optimizers and learning-rate schedules.

use crate::autodiff::ParamSet;
use crate::config::{OptimizerKind, TrainPlan};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor4};

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_end;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear warmup multiplier `(e + 1) / warmup` for `e < warmup`, else 1.
pub fn warmup_factor(epoch: usize, warmup: usize) -> f64 {
    if epoch < warmup {
        (epoch + 1) as f64 / warmup as f64
    } else {
        1.0
    }
}

/// Optimizer state for one gradient group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub clip: Option<f64>,
    pub steps: u64,
    /// Momentum (SGD) or first moment (Adam) per parameter.
    pub first: Vec<Tensor4>,
    /// Second moment per parameter; empty for SGD.
    pub second: Vec<Tensor4>,
}

impl Optimizer {
    pub fn new(plan: &TrainPlan, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor4::zeros(p.value.shape())).collect::<Vec<_>>();
        Optimizer {
            kind: plan.optimizer,
            momentum: plan.momentum,
            weight_decay: plan.weight_decay,
            betas: plan.betas,
            eps: plan.adam_eps,
            clip: plan.grad_clip,
            steps: 0,
            first: zeros(),
            second: if plan.optimizer == OptimizerKind::Sgd {
                Vec::new()
            } else {
                zeros()
            },
        }
    }

    pub fn state_bytes(&self, precision: Precision) -> usize {
        self.first.iter().chain(&self.second).map(|t| t.bytes(precision)).sum()
    }

    /// Clips the group's gradient norm, updates every parameter and zeroes
    /// the gradients. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<f64> {
        if self.first.len() != params.len() {
            return Err(Error::invalid("optimizer", "state does not match the parameter set"));
        }
        let norm = params.grad_norm();
        let scale = match self.clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let [b1, b2] = self.betas;
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let value = std::sync::Arc::make_mut(&mut p.value);
            let grad = p.grad.data();
            let w = value.data_mut();
            let m = self.first[i].data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, &g), m) in w.iter_mut().zip(grad).zip(m.iter_mut()) {
                        let g = g * scale + self.weight_decay * *w;
                        *m = self.momentum * *m + g;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let decoupled = self.kind == OptimizerKind::Adamw;
                    let v = self.second[i].data_mut();
                    for (((w, &g), m), v) in w.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let mut g = g * scale;
                        if decoupled {
                            *w *= 1.0 - lr * self.weight_decay;
                        } else {
                            g += self.weight_decay * *w;
                        }
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::tensor::Shape4;

    fn plan(kind: OptimizerKind) -> TrainPlan {
        let mut p = Config::preset("desk8").unwrap().train;
        p.optimizer = kind;
        p.grad_clip = None;
        p.weight_decay = 0.1;
        p.momentum = 0.5;
        p
    }

    fn one_param(v: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor4::full(Shape4::scalar(), v));
        set_grad(&mut ps, g);
        ps
    }

    fn set_grad(ps: &mut ParamSet, g: f64) {
        ps.iter_mut().for_each(|p| p.grad = Tensor4::full(Shape4::scalar(), g));
    }

    fn value(ps: &ParamSet) -> f64 {
        ps.iter().next().unwrap().1.value.data()[0]
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut ps = one_param(1.0, 2.0);
        let mut opt = Optimizer::new(&plan(OptimizerKind::Sgd), &ps);
        opt.step(&mut ps, 0.1).unwrap();
        // g = 2 + 0.1·1 = 2.1, buf = 2.1, w = 1 − 0.21
        assert!((value(&ps) - 0.79).abs() < 1e-15);
        assert!(ps.grads_all_zero());
        set_grad(&mut ps, 2.0);
        opt.step(&mut ps, 0.1).unwrap();
        let g = 2.0 + 0.1 * 0.79;
        let buf = 0.5 * 2.1 + g;
        assert!((value(&ps) - (0.79 - 0.1 * buf)).abs() < 1e-15);
    }

    #[test]
    fn adamw_and_adam_first_step() {
        let mut ps = one_param(1.0, 2.0);
        let mut opt = Optimizer::new(&plan(OptimizerKind::Adamw), &ps);
        opt.step(&mut ps, 0.01).unwrap();
        // decay 1·(1 − 0.001), then a unit-magnitude Adam step
        let want = 0.999 - 0.01 * 1.0 / (1.0 + 1e-8 / 2.0);
        assert!((value(&ps) - want).abs() < 1e-12);

        let mut ps = one_param(1.0, 2.0);
        let mut opt = Optimizer::new(&plan(OptimizerKind::Adam), &ps);
        opt.step(&mut ps, 0.01).unwrap();
        let g: f64 = 2.1;
        let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((value(&ps) - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_uses_group_norm() {
        let mut p = plan(OptimizerKind::Sgd);
        p.grad_clip = Some(1.0);
        p.weight_decay = 0.0;
        p.momentum = 0.0;
        let mut ps = ParamSet::new();
        ps.add("a", Tensor4::zeros(Shape4::scalar()));
        ps.add("b", Tensor4::zeros(Shape4::scalar()));
        let grads = [3.0, 4.0];
        for (p, g) in ps.iter_mut().zip(grads) {
            p.grad = Tensor4::full(Shape4::scalar(), g);
        }
        let mut opt = Optimizer::new(&p, &ps);
        let norm = opt.step(&mut ps, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let vals: Vec<f64> = ps.iter().map(|(_, p)| p.value.data()[0]).collect();
        let s = 1.0 / (5.0 + 1e-6);
        assert!((vals[0] + 3.0 * s).abs() < 1e-15 && (vals[1] + 4.0 * s).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.05, 5e-4), 0.05);
        assert!((cosine_lr(100, 100, 0.05, 5e-4) - 5e-4).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.05, 5e-4) - (0.05 + 5e-4) / 2.0).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=1000).map(|s| cosine_lr(s, 1000, 0.05, 5e-4)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn warmup_is_linear() {
        for e in 0..5 {
            assert_eq!(warmup_factor(e, 5), (e + 1) as f64 / 5.0);
        }
        assert_eq!(warmup_factor(5, 5), 1.0);
        assert_eq!(warmup_factor(0, 0), 1.0);
    }
}
