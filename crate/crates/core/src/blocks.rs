//! The conv block `f = ReLU(Conv3x3(h))`, `h' = Norm(Dropout(Pool(f)))` and
//! the feature alignment layer applied at group boundaries.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::goodness::GoodnessConfig;
use crate::ops;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const FAL_HIDDEN: usize = 512;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    RmsNorm,
    BatchNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_pool: bool,
    pub dropout_p: f64,
    pub norm: NormKind,
    pub goodness: GoodnessConfig,
}

/// Forward mode. Training draws one dropout mask per block from the stream.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Running statistics of an affine-free batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

fn uniform<R: Rng + ?Sized>(shape: Shape4, bound: f64, rng: &mut R) -> Tensor4 {
    let mut t = Tensor4::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

#[derive(Clone, Debug)]
pub struct Block {
    pub spec: BlockSpec,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub bn: Option<BnStats>,
}

/// `f` feeds the goodness head; `h` is forwarded to the next block.
pub struct BlockOutput {
    pub f: Var,
    pub h: Var,
}

impl Block {
    /// Conv weight and bias drawn from `U(±1/√(9·C_in))`.
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, spec: BlockSpec, rng: &mut R) -> Self {
        let bound = 1.0 / ((9 * spec.in_channels) as f64).sqrt();
        let conv_w = params.add(
            format!("{prefix}.conv_w"),
            uniform(Shape4::new(spec.out_channels, spec.in_channels, 3, 3), bound, rng),
        );
        let conv_b = params.add(
            format!("{prefix}.conv_b"),
            uniform(Shape4::new(1, spec.out_channels, 1, 1), bound, rng),
        );
        let bn = (spec.norm == NormKind::BatchNorm).then(|| BnStats::new(spec.out_channels));
        Block {
            spec,
            conv_w,
            conv_b,
            bn,
        }
    }

    /// Runs the block on `x`. With `trace_output` false the pool, dropout and
    /// norm stages run off the trace and `h` comes back as a detached leaf.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        x: &Var,
        mode: &mut Mode<'_>,
        trace_output: bool,
    ) -> Result<BlockOutput> {
        if x.shape().c != self.spec.in_channels {
            return Err(Error::shape("block_forward", "input channels", self.spec.in_channels, x.shape().c));
        }
        let w = tape.param(params, self.conv_w);
        let b = tape.param(params, self.conv_b);
        let z = tape.conv2d(x, &w, &b)?;
        let f = tape.relu(&z)?;
        let h = if trace_output {
            self.tail(tape, &f, mode)?
        } else {
            let mut off = Tape::inference();
            let fl = off.input(Arc::clone(f.arc()), false);
            let h = self.tail(&mut off, &fl, mode)?;
            tape.input(Arc::clone(h.arc()), false)
        };
        Ok(BlockOutput { f, h })
    }

    fn tail(&mut self, tape: &mut Tape, f: &Var, mode: &mut Mode<'_>) -> Result<Var> {
        let mut y = if self.spec.has_pool {
            tape.rms_pool(f)?
        } else {
            f.clone()
        };
        if let Mode::Train(rng) = mode {
            if self.spec.dropout_p > 0.0 {
                let mask = ops::dropout_mask(y.shape(), self.spec.dropout_p, &mut **rng);
                y = tape.dropout(&y, mask)?;
            }
        }
        match (self.spec.norm, &mut self.bn) {
            (NormKind::RmsNorm, _) => tape.rms_norm(&y),
            (NormKind::BatchNorm, Some(bn)) => {
                if mode.is_train() {
                    tape.batch_norm_train(&y, &mut bn.mean, &mut bn.var, BN_MOMENTUM)
                } else {
                    tape.batch_norm_eval(&y, &bn.mean, &bn.var)
                }
            }
            (NormKind::BatchNorm, None) => Err(Error::invalid("block_forward", "batch norm without running statistics")),
        }
    }
}

/// `h' = h + W2·ReLU(W1·GAP(h))`, owned by the group that consumes `h'`.
#[derive(Clone, Debug)]
pub struct FalParams {
    pub channels: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FalParams {
    /// `W1 ~ U(±1/√C)`, `W2 = 0`.
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        let w1 = params.add(
            format!("{prefix}.w1"),
            uniform(Shape4::matrix(hidden, channels), 1.0 / (channels as f64).sqrt(), rng),
        );
        let w2 = params.add(format!("{prefix}.w2"), Tensor4::zeros(Shape4::matrix(channels, hidden)));
        FalParams {
            channels,
            hidden,
            w1,
            w2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, h: &Var) -> Result<Var> {
        if h.shape().c != self.channels {
            return Err(Error::shape("fal_forward", "channels", self.channels, h.shape().c));
        }
        let w1 = tape.param(params, self.w1);
        let w2 = tape.param(params, self.w2);
        let gap = tape.global_avg_pool(h)?;
        let a = tape.linear(&gap, &w1, None)?;
        let a = tape.relu(&a)?;
        let delta = tape.linear(&a, &w2, None)?;
        tape.add_channel(h, &delta)
    }
}

/// Value-identical leaf on `tape` with no gradient path to `h`.
pub fn detach(tape: &mut Tape, h: &Var) -> Var {
    tape.detach(h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::goodness::GoodnessHead;
    use crate::testutil::{assert_grad_close, finite_diff, lcg_tensor};

    fn spec(cin: usize, cout: usize, pool: bool, norm: NormKind) -> BlockSpec {
        BlockSpec {
            in_channels: cin,
            out_channels: cout,
            has_pool: pool,
            dropout_p: DEFAULT_DROPOUT,
            norm,
            goodness: GoodnessConfig::new(1, 2),
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut blk = Block::init(&mut ps, "b", spec(2, 3, false, NormKind::RmsNorm), &mut rng);
        ps.value_mut(blk.conv_w).fill(0.0);
        ps.value_mut(blk.conv_b).fill(0.0);
        let mut tape = Tape::new();
        let x = tape.input(Arc::new(lcg_tensor(Shape4::new(2, 2, 4, 4), 1)), false);
        let out = blk.forward(&mut tape, &ps, &x, &mut Mode::Eval, true).unwrap();
        assert!(out.f.value().is_all_zero());
        assert!(out.h.value().is_all_zero());
    }

    #[test]
    fn pool_halves_spatial() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut blk = Block::init(&mut ps, "b", spec(1, 1, true, NormKind::RmsNorm), &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(Arc::new(lcg_tensor(Shape4::new(1, 1, 4, 4), 2)), false);
        let out = blk.forward(&mut tape, &ps, &x, &mut Mode::Eval, true).unwrap();
        assert_eq!(out.f.shape(), Shape4::new(1, 1, 4, 4));
        assert_eq!(out.h.shape(), Shape4::new(1, 1, 2, 2));
        let bad = tape.input(Arc::new(Tensor4::zeros(Shape4::new(1, 2, 4, 4))), false);
        assert!(blk.forward(&mut tape, &ps, &bad, &mut Mode::Eval, true).is_err());
    }

    #[test]
    fn stage_order_is_pool_dropout_norm() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = spec(2, 3, true, NormKind::RmsNorm);
        s.dropout_p = 0.5;
        let mut blk = Block::init(&mut ps, "b", s, &mut rng);
        let x = lcg_tensor(Shape4::new(1, 2, 4, 4), 4);
        let mut tape = Tape::new();
        let xv = tape.input(Arc::new(x.clone()), false);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
        let out = blk
            .forward(&mut tape, &ps, &xv, &mut Mode::Train(&mut drop_rng), true)
            .unwrap();

        let f = ops::relu(&ops::conv2d_forward(&x, ps.value(blk.conv_w), ps.value(blk.conv_b)).unwrap());
        let pooled = ops::rms_pool(&f).unwrap();
        let mask = ops::dropout_mask(pooled.shape(), 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let mut dropped = pooled.clone();
        dropped.data_mut().iter_mut().zip(mask.data()).for_each(|(v, m)| *v *= m);
        let (golden, _) = ops::rms_norm_forward(&dropped);
        assert!(out.h.value().bitwise_eq(&golden));

        let (normed_first, _) = ops::rms_norm_forward(&pooled);
        let mut reordered = normed_first;
        reordered.data_mut().iter_mut().zip(mask.data()).for_each(|(v, m)| *v *= m);
        assert!(reordered.max_abs_diff(&golden) > 1e-3);
    }

    #[test]
    fn eval_is_deterministic() {
        for norm in [NormKind::RmsNorm, NormKind::BatchNorm] {
            let mut ps = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut blk = Block::init(&mut ps, "b", spec(3, 4, true, norm), &mut rng);
            let x = Arc::new(lcg_tensor(Shape4::new(2, 3, 6, 6), 6));
            let run = |blk: &mut Block| {
                let mut tape = Tape::inference();
                let xv = tape.input(Arc::clone(&x), false);
                let o = blk.forward(&mut tape, &ps, &xv, &mut Mode::Eval, true).unwrap();
                (o.f.value().clone(), o.h.value().clone())
            };
            let (f1, h1) = run(&mut blk);
            let (f2, h2) = run(&mut blk);
            assert!(f1.bitwise_eq(&f2) && h1.bitwise_eq(&h2));
        }
    }

    #[test]
    fn untraced_output_matches_traced_and_holds_nothing() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut blk = Block::init(&mut ps, "b", spec(2, 4, true, NormKind::RmsNorm), &mut rng);
        let x = Arc::new(lcg_tensor(Shape4::new(2, 2, 4, 4), 7));
        let mut results = Vec::new();
        for traced in [true, false] {
            let mut tape = Tape::new();
            let xv = tape.input(Arc::clone(&x), false);
            let mut d = ChaCha8Rng::seed_from_u64(1);
            let out = blk.forward(&mut tape, &ps, &xv, &mut Mode::Train(&mut d), traced).unwrap();
            results.push((out.h.value().clone(), tape.resident_bytes()));
        }
        assert!(results[0].0.bitwise_eq(&results[1].0));
        assert!(results[1].1 < results[0].1);
    }

    /// conv → ReLU → pool → dropout → norm → BiCovG → readout → CE, mask frozen.
    #[test]
    fn full_block_gradient() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = spec(2, 8, true, NormKind::RmsNorm);
        let blk = Block::init(&mut ps, "b", s.clone(), &mut rng);
        let head = GoodnessHead::init(&mut ps, "g", s.goodness, 8, 4, 4, 3, &mut rng).unwrap();
        let next = Block::init(&mut ps, "n", spec(8, 8, false, NormKind::RmsNorm), &mut rng);
        let x = lcg_tensor(Shape4::new(2, 2, 4, 4), 9);
        let labels = [1, 2];

        let loss_of = |ps: &ParamSet| -> (f64, ParamSet) {
            let (mut blk, mut next) = (blk.clone(), next.clone());
            let mut tape = Tape::new();
            let xv = tape.input(Arc::new(x.clone()), false);
            let mut d = ChaCha8Rng::seed_from_u64(77);
            let o = blk.forward(&mut tape, ps, &xv, &mut Mode::Train(&mut d), true).unwrap();
            // a second block consuming h keeps the pool, dropout and norm stages in the loss
            let o2 = next.forward(&mut tape, ps, &o.h, &mut Mode::Eval, true).unwrap();
            let (_, logits) = head.forward(&mut tape, ps, &o.f).unwrap();
            let e = tape.region_energy(&o2.f, 1).unwrap();
            let e = tape.sum(&e).unwrap();
            let ce = tape.softmax_cross_entropy(&logits, &labels).unwrap();
            let total = tape.add(&ce, &e).unwrap();
            let mut grads = ps.clone();
            tape.backward(&total, &mut grads).unwrap();
            (total.scalar(), grads)
        };
        let (_, grads) = loss_of(&ps);
        for id in [blk.conv_w, blk.conv_b, head.w_cc.unwrap(), head.w_out] {
            let f = |v: &Tensor4| {
                let mut p = ps.clone();
                p.set_value(id, v.clone()).unwrap();
                loss_of(&p).0
            };
            assert_grad_close(grads.grad(id), &finite_diff(&f, ps.value(id), 1e-5), 1e-5);
        }
    }

    #[test]
    fn fal_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let fal = FalParams::init(&mut ps, "fal", 6, FAL_HIDDEN, &mut rng);
        assert!(ps.value(fal.w2).is_all_zero());
        for seed in 0..20 {
            let h = lcg_tensor(Shape4::new(2, 6, 3, 3), seed).map(|v| v * 1e3);
            let mut tape = Tape::inference();
            let hv = tape.input(Arc::new(h.clone()), false);
            let out = fal.forward(&mut tape, &ps, &hv).unwrap();
            assert!(out.value().bitwise_eq(&h));
        }
        let mut tape = Tape::inference();
        let bad = tape.input(Arc::new(Tensor4::zeros(Shape4::new(1, 5, 2, 2))), false);
        assert!(fal.forward(&mut tape, &ps, &bad).is_err());
    }

    #[test]
    fn fal_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let fal = FalParams::init(&mut ps, "fal", 4, 6, &mut rng);
        ps.set_value(fal.w2, lcg_tensor(Shape4::matrix(4, 6), 12)).unwrap();
        let ro = ps.add("ro", lcg_tensor(Shape4::matrix(3, 4 * 4), 13));
        let h = lcg_tensor(Shape4::new(2, 4, 2, 2), 14);
        let labels = [0, 2];
        let ce = |ps: &ParamSet| -> (f64, ParamSet) {
            let mut tape = Tape::new();
            let hv = tape.input(Arc::new(h.clone()), false);
            let out = fal.forward(&mut tape, ps, &hv).unwrap();
            let w = tape.param(ps, ro);
            let logits = tape.linear(&out, &w, None).unwrap();
            let l = tape.softmax_cross_entropy(&logits, &labels).unwrap();
            let mut p = ps.clone();
            tape.backward(&l, &mut p).unwrap();
            (l.scalar(), p)
        };
        let (_, grads) = ce(&ps);
        for id in [fal.w1, fal.w2] {
            let f = |v: &Tensor4| {
                let mut p = ps.clone();
                p.set_value(id, v.clone()).unwrap();
                ce(&p).0
            };
            assert_grad_close(grads.grad(id), &finite_diff(&f, ps.value(id), 1e-5), 1e-5);
        }
    }

    #[test]
    fn detach_blocks_upstream_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p0 = ParamSet::new();
        let mut p1 = ParamSet::new();
        let mut b0 = Block::init(&mut p0, "b0", spec(1, 8, false, NormKind::RmsNorm), &mut rng);
        let mut b1 = Block::init(&mut p1, "b1", spec(8, 8, false, NormKind::RmsNorm), &mut rng);
        let head1 = GoodnessHead::init(&mut p1, "g1", GoodnessConfig::new(1, 2), 8, 4, 4, 2, &mut rng).unwrap();
        let x = Arc::new(lcg_tensor(Shape4::new(2, 1, 4, 4), 15));

        let block1_loss = |p0: &ParamSet, p1: &mut ParamSet, b0: &mut Block, b1: &mut Block| -> f64 {
            let mut t0 = Tape::new();
            let xv = t0.input(Arc::clone(&x), false);
            let o0 = b0.forward(&mut t0, p0, &xv, &mut Mode::Eval, true).unwrap();
            let mut t1 = Tape::new();
            let h = detach(&mut t1, &o0.h);
            assert!(h.value().bitwise_eq(o0.h.value()));
            let o1 = b1.forward(&mut t1, p1, &h, &mut Mode::Eval, true).unwrap();
            let (_, logits) = head1.forward(&mut t1, p1, &o1.f).unwrap();
            let l = t1.softmax_cross_entropy(&logits, &[0, 1]).unwrap();
            t1.backward(&l, p1).unwrap();
            l.scalar()
        };
        let before = block1_loss(&p0, &mut p1, &mut b0, &mut b1);
        assert!(p0.grads_all_zero());
        assert!(!p1.grads_all_zero());
        p0.value_mut(b0.conv_w).data_mut()[0] += 0.5;
        let after = block1_loss(&p0, &mut p1, &mut b0, &mut b1);
        assert_ne!(before, after);
        assert!(p0.grads_all_zero());
    }
}
