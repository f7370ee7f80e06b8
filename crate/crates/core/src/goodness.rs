//! Bi-axis covariance goodness and the per-layer readout.
//!
//! For a post-ReLU activation `f` of shape `(B, C, H, W)` and a scale `s`,
//! the spatial domain is cut into `s × s` regions. Per-channel spatial
//! goodness (pcs) is the region mean of `f²` for every channel; cross-channel
//! goodness (cc) is the region mean of `(W_cc f)²`, where the `N = C / r`
//! rows of `W_cc` each mix all channels. With two scales the encoding is
//!
//! ```text
//! g = [ pcs(s1) | cc(s1) | pcs(s2) | cc(s2) ]
//! ```
//!
//! and within each segment entries run channel (or projection row) outer,
//! then region row, then region column. The order is part of the checkpoint
//! format and must not change.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_REDUCTION_RATIO: usize = 8;

fn default_ratio() -> usize {
    DEFAULT_REDUCTION_RATIO
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoodnessConfig {
    /// `(s1, s2)` with `s1 < s2`.
    pub scales: (usize, usize),
    #[serde(default = "default_ratio")]
    pub reduction_ratio: usize,
    #[serde(default = "yes")]
    pub include_cc: bool,
    /// When false a single global scale (`s = 1`) is used, which together
    /// with `include_cc = false` is plain per-channel energy.
    #[serde(default = "yes")]
    pub include_multiscale: bool,
}

impl GoodnessConfig {
    pub fn new(s1: usize, s2: usize) -> Self {
        GoodnessConfig {
            scales: (s1, s2),
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            include_cc: true,
            include_multiscale: true,
        }
    }

    /// Plain per-channel energy: one global region, no projections.
    pub fn per_channel() -> Self {
        GoodnessConfig {
            scales: (1, 2),
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            include_cc: false,
            include_multiscale: false,
        }
    }

    pub fn active_scales(&self) -> Vec<usize> {
        if self.include_multiscale {
            vec![self.scales.0, self.scales.1]
        } else {
            vec![1]
        }
    }

    /// Checks the config against a layer of `channels` and `h × w` spatial size.
    pub fn validate(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if self.include_multiscale && self.scales.0 >= self.scales.1 {
            return Err(Error::invalid(
                "goodness config",
                format!("scales must satisfy s1 < s2, got {:?}", self.scales),
            ));
        }
        if self.scales.0 == 0 {
            return Err(Error::invalid("goodness config", "scales must be positive"));
        }
        let largest = self.active_scales().into_iter().max().unwrap_or(1);
        if largest > h.min(w) {
            return Err(Error::invalid(
                "goodness config",
                format!("scale {largest} exceeds the {h}x{w} spatial size"),
            ));
        }
        if self.include_cc
            && (self.reduction_ratio == 0 || !channels.is_multiple_of(self.reduction_ratio)) {
                return Err(Error::invalid(
                    "goodness config",
                    format!("reduction ratio {} does not divide {channels} channels", self.reduction_ratio),
                ));
            }
        Ok(())
    }

    /// Number of cross-channel projections `N = C / r` (0 when cc is off).
    pub fn projections(&self, channels: usize) -> usize {
        if self.include_cc {
            channels / self.reduction_ratio
        } else {
            0
        }
    }

    /// Goodness dimension `D = (C + N) · Σ s²`.
    pub fn dim(&self, channels: usize) -> usize {
        let area: usize = self.active_scales().iter().map(|s| s * s).sum();
        (channels + self.projections(channels)) * area
    }
}

/// Per-channel spatial goodness, `(B, C, H, W)` → `(B, C·s²)`.
pub fn pcs_goodness(f: &Tensor4, s: usize) -> Result<Tensor4> {
    ops::region_energy(f, s)
}

/// Cross-channel goodness, `(B, C, H, W)` × `(N, C)` → `(B, N·s²)`.
pub fn cc_goodness(f: &Tensor4, w_cc: &Tensor4, s: usize) -> Result<Tensor4> {
    let proj = ops::channel_project_forward(f, w_cc)?;
    ops::region_energy(&proj, s)
}

/// Per-layer goodness encoding and logits for a batch.
#[derive(Clone, Debug)]
pub struct GoodnessVector {
    pub layer: usize,
    /// `(B, D)`.
    pub values: Tensor4,
    /// `(B, K)`.
    pub logits: Tensor4,
}

/// Parameter handles of one goodness head inside its group's [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GoodnessHead {
    pub config: GoodnessConfig,
    pub channels: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub w_cc: Option<ParamId>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

fn uniform<R: Rng + ?Sized>(shape: Shape4, bound: f64, rng: &mut R) -> Tensor4 {
    let mut t = Tensor4::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

impl GoodnessHead {
    /// Registers `W_cc ~ U(±1/√C)` and `W_l, b_l ~ U(±1/√D)` under `prefix`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        config: GoodnessConfig,
        channels: usize,
        h: usize,
        w: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(channels, h, w)?;
        let dim = config.dim(channels);
        let n = config.projections(channels);
        let w_cc = (n > 0).then(|| {
            params.add(
                format!("{prefix}.w_cc"),
                uniform(Shape4::matrix(n, channels), 1.0 / (channels as f64).sqrt(), rng),
            )
        });
        let bound = 1.0 / (dim as f64).sqrt();
        let w_out = params.add(format!("{prefix}.w_out"), uniform(Shape4::matrix(num_classes, dim), bound, rng));
        let b_out = params.add(format!("{prefix}.b_out"), uniform(Shape4::new(1, num_classes, 1, 1), bound, rng));
        Ok(GoodnessHead {
            config,
            channels,
            dim,
            num_classes,
            w_cc,
            w_out,
            b_out,
        })
    }

    /// Traced encoding of `f`; returns `(g, logits)`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, f: &Var) -> Result<(Var, Var)> {
        if f.shape().c != self.channels {
            return Err(Error::shape("bicovg_encode", "channels", self.channels, f.shape().c));
        }
        let proj = match self.w_cc {
            Some(id) => {
                let w = tape.param(params, id);
                Some(tape.channel_project(f, &w)?)
            }
            None => None,
        };
        let mut parts = Vec::with_capacity(4);
        for s in self.config.active_scales() {
            parts.push(tape.region_energy(f, s)?);
            if let Some(p) = &proj {
                parts.push(tape.region_energy(p, s)?);
            }
        }
        let g = tape.concat(&parts)?;
        let logits = self.readout_traced(tape, params, &g)?;
        Ok((g, logits))
    }

    pub fn readout_traced(&self, tape: &mut Tape, params: &ParamSet, g: &Var) -> Result<Var> {
        if g.shape().per_sample() != self.dim {
            return Err(Error::shape("readout", "goodness length", self.dim, g.shape().per_sample()));
        }
        let w = tape.param(params, self.w_out);
        let b = tape.param(params, self.b_out);
        tape.linear(g, &w, Some(&b))
    }

    /// Untraced encoding.
    pub fn encode(&self, params: &ParamSet, f: &Tensor4, layer: usize) -> Result<GoodnessVector> {
        let mut tape = Tape::inference();
        let fv = tape.input(std::sync::Arc::new(f.clone()), false);
        let (g, logits) = self.forward(&mut tape, params, &fv)?;
        Ok(GoodnessVector {
            layer,
            values: g.value().clone(),
            logits: logits.value().clone(),
        })
    }

    /// `ŷ = W_l g + b_l` on an untraced goodness matrix.
    pub fn readout(&self, params: &ParamSet, g: &Tensor4) -> Result<Tensor4> {
        if g.shape().per_sample() != self.dim {
            return Err(Error::shape("readout", "goodness length", self.dim, g.shape().per_sample()));
        }
        ops::linear_forward(g, params.value(self.w_out), Some(params.value(self.b_out)))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testutil::{assert_grad_close, finite_diff, lcg_tensor};

    fn brute_region_energy(f: &Tensor4, s: usize) -> Vec<f64> {
        let sh = f.shape();
        let mut out = Vec::new();
        for b in 0..sh.b {
            for c in 0..sh.c {
                for i in 0..s {
                    for j in 0..s {
                        let (r0, r1) = (i * sh.h / s, (i + 1) * sh.h / s);
                        let (c0, c1) = (j * sh.w / s, (j + 1) * sh.w / s);
                        let mut acc = 0.0;
                        for y in r0..r1 {
                            for x in c0..c1 {
                                acc += f.at(b, c, y, x).powi(2);
                            }
                        }
                        out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pcs_small_cases() {
        let f = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pcs_goodness(&f, 1).unwrap().data(), &[7.5]);
        assert_eq!(pcs_goodness(&f, 2).unwrap().data(), &[1.0, 4.0, 9.0, 16.0]);
        assert!(pcs_goodness(&f, 3).is_err());
    }

    #[test]
    fn pcs_matches_brute_force() {
        let f = lcg_tensor(Shape4::new(2, 3, 6, 6), 1);
        let got = pcs_goodness(&f, 2).unwrap();
        let want = brute_region_energy(&f, 2);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cc_one_hot_reduces_to_pcs() {
        let f = lcg_tensor(Shape4::new(2, 4, 5, 5), 2);
        let mut w = Tensor4::zeros(Shape4::matrix(1, 4));
        w.data_mut()[2] = 1.0;
        let cc = cc_goodness(&f, &w, 2).unwrap();
        let pcs = pcs_goodness(&f, 2).unwrap();
        for b in 0..2 {
            assert_eq!(cc.sample(b), &pcs.sample(b)[2 * 4..3 * 4]);
        }
    }

    #[test]
    fn cc_constant_channels() {
        let (a, b) = (1.5, -0.25);
        let f = Tensor4::from_fn(Shape4::new(1, 2, 4, 4), |_, c, _, _| if c == 0 { a } else { b });
        let w = Tensor4::full(Shape4::matrix(1, 2), 1.0);
        let cc = cc_goodness(&f, &w, 2).unwrap();
        assert!(cc.data().iter().all(|&v| v == (a + b) * (a + b)));
    }

    #[test]
    fn cc_matches_brute_force_and_gradient() {
        let f = lcg_tensor(Shape4::new(2, 3, 5, 4), 3);
        let w = lcg_tensor(Shape4::matrix(2, 3), 4);
        let got = cc_goodness(&f, &w, 2).unwrap();
        // brute: project each pixel then region-average its square
        let proj = Tensor4::from_fn(Shape4::new(2, 2, 5, 4), |b, k, y, x| {
            (0..3).map(|c| w.at(k, c, 0, 0) * f.at(b, c, y, x)).sum()
        });
        let want = brute_region_energy(&proj, 2);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }

        let loss = |w: &Tensor4| cc_goodness(&f, w, 2).unwrap().sum();
        let mut tape = Tape::new();
        let mut ps = ParamSet::new();
        let pid = ps.add("w_cc", w.clone());
        let fv = tape.input(Arc::new(f.clone()), false);
        let wv = tape.param(&ps, pid);
        let p = tape.channel_project(&fv, &wv).unwrap();
        let e = tape.region_energy(&p, 2).unwrap();
        let s = tape.sum(&e).unwrap();
        tape.backward(&s, &mut ps).unwrap();
        assert_grad_close(ps.grad(pid), &finite_diff(&loss, &w, 1e-5), 1e-6);
    }

    #[test]
    fn dimension_formula() {
        assert_eq!(GoodnessConfig::new(2, 4).dim(128), 2880);
        assert_eq!(GoodnessConfig::new(1, 2).dim(256), 1440);
        assert_eq!(GoodnessConfig::new(1, 2).dim(512), 2880);
        assert_eq!(GoodnessConfig::new(1, 2).dim(8), 45);
        assert_eq!(GoodnessConfig::per_channel().dim(128), 128);
    }

    #[test]
    fn ratio_must_divide_channels() {
        let cfg = GoodnessConfig::new(1, 2);
        assert!(cfg.validate(12, 4, 4).is_err());
        assert!(cfg.validate(16, 4, 4).is_ok());
        assert!(GoodnessConfig::new(2, 8).validate(16, 4, 4).is_err());
        assert!(GoodnessConfig::new(2, 2).validate(16, 4, 4).is_err());
    }

    #[test]
    fn encode_layout_and_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let cfg = GoodnessConfig::new(1, 2);
        let head = GoodnessHead::init(&mut ps, "h", cfg, 8, 4, 4, 3, &mut rng).unwrap();
        assert_eq!(head.dim, 45);
        let f = lcg_tensor(Shape4::new(2, 8, 4, 4), 9).map(f64::abs);
        let gv = head.encode(&ps, &f, 0).unwrap();
        assert_eq!(gv.values.shape(), Shape4::matrix(2, 45));
        assert_eq!(gv.logits.shape(), Shape4::matrix(2, 3));
        let w_cc = ps.value(head.w_cc.unwrap());
        let expect: Vec<f64> = [
            pcs_goodness(&f, 1).unwrap(),
            cc_goodness(&f, w_cc, 1).unwrap(),
            pcs_goodness(&f, 2).unwrap(),
            cc_goodness(&f, w_cc, 2).unwrap(),
        ]
        .iter()
        .flat_map(|t| t.sample(1).to_vec())
        .collect();
        assert_eq!(gv.values.sample(1), &expect[..]);
        let logits = head.readout(&ps, &gv.values).unwrap();
        assert!(logits.bitwise_eq(&gv.logits));
        assert!(head.readout(&ps, &Tensor4::zeros(Shape4::matrix(1, 44))).is_err());
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let head = GoodnessHead::init(&mut ps, "h", GoodnessConfig::new(1, 2), 16, 4, 4, 10, &mut rng).unwrap();
        let bd = 1.0 / (head.dim as f64).sqrt();
        assert!(ps.value(head.w_out).data().iter().all(|v| v.abs() < bd));
        assert!(ps.value(head.b_out).data().iter().all(|v| v.abs() < bd));
        let bc = 1.0 / 4.0;
        assert!(ps.value(head.w_cc.unwrap()).data().iter().all(|v| v.abs() < bc));
    }

    #[test]
    fn nonnegative_and_scale_equivariant() {
        let f = lcg_tensor(Shape4::new(2, 4, 6, 6), 11);
        let w = lcg_tensor(Shape4::matrix(2, 4), 12);
        for s in 1..=3 {
            let p = pcs_goodness(&f, s).unwrap();
            assert!(p.data().iter().all(|&v| v >= 0.0));
            assert!(cc_goodness(&f, &w, s).unwrap().data().iter().all(|&v| v >= 0.0));
            let alpha = 2.0;
            let scaled = pcs_goodness(&f.map(|v| v * alpha), s).unwrap();
            for (a, b) in scaled.data().iter().zip(p.data()) {
                assert_eq!(*a, b * alpha * alpha);
            }
        }
    }

    #[test]
    fn cc_permutation_covariance() {
        let f = lcg_tensor(Shape4::new(2, 4, 4, 4), 13);
        let w = lcg_tensor(Shape4::matrix(3, 4), 14);
        let perm = [2, 0, 3, 1];
        let fp = Tensor4::from_fn(f.shape(), |b, c, y, x| f.at(b, perm[c], y, x));
        let wp = Tensor4::from_fn(w.shape(), |k, c, _, _| w.at(k, perm[c], 0, 0));
        let a = cc_goodness(&f, &w, 2).unwrap();
        let b = cc_goodness(&fp, &wp, 2).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-14);
    }

    #[test]
    fn readout_arithmetic_and_gradient() {
        let mut ps = ParamSet::new();
        let head = GoodnessHead {
            config: GoodnessConfig::per_channel(),
            channels: 1,
            dim: 1,
            num_classes: 2,
            w_cc: None,
            w_out: ps.add("w", Tensor4::from_vec(Shape4::matrix(2, 1), vec![2.0, -1.0]).unwrap()),
            b_out: ps.add("b", Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![0.5, 0.0]).unwrap()),
        };
        let g = Tensor4::from_vec(Shape4::matrix(1, 1), vec![3.0]).unwrap();
        assert_eq!(head.readout(&ps, &g).unwrap().data(), &[6.5, -3.0]);
        ps.value_mut(head.w_out).fill(0.0);
        ps.value_mut(head.b_out).fill(0.0);
        assert!(head.readout(&ps, &g).unwrap().is_all_zero());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let head = GoodnessHead::init(&mut ps, "h", GoodnessConfig::new(1, 2), 8, 4, 4, 3, &mut rng).unwrap();
        let g = lcg_tensor(Shape4::matrix(4, head.dim), 6).map(f64::abs);
        let labels = [0, 2, 1, 2];
        let mut tape = Tape::new();
        let gv = tape.input(Arc::new(g.clone()), false);
        let logits = head.readout_traced(&mut tape, &ps, &gv).unwrap();
        let loss = tape.softmax_cross_entropy(&logits, &labels).unwrap();
        tape.backward(&loss, &mut ps).unwrap();
        let b = ps.value(head.b_out).clone();
        let ce = |w: &Tensor4| {
            let l = ops::linear_forward(&g, w, Some(&b)).unwrap();
            ops::softmax_cross_entropy(&l, &labels).unwrap().0
        };
        let w = ps.value(head.w_out).clone();
        assert_grad_close(ps.grad(head.w_out), &finite_diff(&ce, &w, 1e-5), 1e-6);
    }

    #[test]
    fn per_channel_baseline_is_global_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let head = GoodnessHead::init(&mut ps, "h", GoodnessConfig::per_channel(), 6, 5, 5, 2, &mut rng).unwrap();
        assert!(head.w_cc.is_none());
        let f = lcg_tensor(Shape4::new(1, 6, 5, 5), 3);
        let gv = head.encode(&ps, &f, 0).unwrap();
        assert_eq!(gv.values.data(), pcs_goodness(&f, 1).unwrap().data());
    }
}
