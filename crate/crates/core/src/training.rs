//! Network state and the local training steps.
//!
//! Layers are split into gradient groups of `m` consecutive blocks. Each
//! group owns its parameters (blocks, the FAL in front of its first block
//! and the goodness head at its exit) and its optimizer state, and is
//! trained only by the cross-entropy of its exit head. Group inputs are
//! detached, so no gradient ever crosses a group boundary.

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape, Var};
use crate::blocks::{Block, FalParams, Mode};
use crate::config::{Config, Execution};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::goodness::GoodnessHead;
use crate::meter::MemoryMeter;
use crate::ops;
use crate::optim::{cosine_lr, warmup_factor, Optimizer};
use crate::tensor::{Precision, Shape4, Tensor4};

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Independent ChaCha stream `id` under `seed`.
pub fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub block: Block,
    /// Present only at group exits.
    pub head: Option<GoodnessHead>,
    /// Alignment layer applied to this block's input.
    pub fal: Option<FalParams>,
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct Group {
    pub range: Range<usize>,
    pub params: ParamSet,
    pub opt: Optimizer,
}

/// Per-head results of one training step.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub losses: Vec<f64>,
    pub correct: Vec<usize>,
    pub batch: usize,
    /// Traced bytes each group held at the end of its forward pass.
    pub trace_bytes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub layers: Vec<Layer>,
    pub groups: Vec<Group>,
    pub dropout_rng: ChaCha8Rng,
    pub data_rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    /// Steps in the whole run; 0 keeps the learning rate at `lr_start`.
    pub total_steps: usize,
    /// Forward-backward-step-release cycles executed so far.
    pub cycles: usize,
    pub fusion_alpha: Option<Vec<f64>>,
    /// Input standardisation fitted on the training split.
    pub input_norm: Option<Normalizer>,
    pub meter: Option<Arc<MemoryMeter>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `logits` whose argmax equals the label.
pub fn count_correct(logits: &Tensor4, labels: &[usize]) -> usize {
    (0..logits.shape().b)
        .filter(|&b| argmax(logits.sample(b)) == labels[b])
        .count()
}

impl TrainState {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let arch = &config.arch;
        let plan = &config.train;
        let mut init = rng_stream(plan.seed, INIT_STREAM);
        let specs = arch.block_specs();
        let spatial = arch.block_spatial();
        let fal_at = arch.fal_boundaries(plan.hgb_m);
        let mut layers = Vec::with_capacity(specs.len());
        let mut groups = Vec::new();
        for (gi, range) in arch.groups(plan.hgb_m).into_iter().enumerate() {
            let mut params = ParamSet::new();
            for l in range.clone() {
                let spec = specs[l].clone();
                let fal = fal_at.contains(&l).then(|| {
                    FalParams::init(&mut params, &format!("layer{l}.fal"), spec.in_channels, arch.fal_hidden, &mut init)
                });
                let block = Block::init(&mut params, &format!("layer{l}"), spec.clone(), &mut init);
                let head = if l + 1 == range.end {
                    let (h, w) = spatial[l];
                    Some(GoodnessHead::init(
                        &mut params,
                        &format!("layer{l}.head"),
                        spec.goodness,
                        spec.out_channels,
                        h,
                        w,
                        arch.num_classes,
                        &mut init,
                    )?)
                } else {
                    None
                };
                layers.push(Layer {
                    block,
                    head,
                    fal,
                    group: gi,
                });
            }
            if plan.precision == Precision::F32 {
                params.iter_mut().for_each(|p| Arc::make_mut(&mut p.value).round_to(Precision::F32));
            }
            let opt = Optimizer::new(plan, &params);
            groups.push(Group { range, params, opt });
        }
        Ok(TrainState {
            dropout_rng: rng_stream(plan.seed, DROPOUT_STREAM),
            data_rng: rng_stream(plan.seed, DATA_STREAM),
            config,
            layers,
            groups,
            epoch: 0,
            step: 0,
            total_steps: 0,
            cycles: 0,
            fusion_alpha: None,
            input_norm: None,
            meter: None,
        })
    }

    pub fn precision(&self) -> Precision {
        self.config.train.precision
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layers that carry a goodness head, in depth order.
    pub fn head_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.layers[l].head.is_some()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(|g| g.params.numel()).sum()
    }

    /// Parameter, gradient and optimizer-state bytes.
    pub fn static_bytes(&self) -> (usize, usize, usize) {
        let p = self.precision();
        let params = self.param_count() * p.bytes();
        let opt = self.groups.iter().map(|g| g.opt.state_bytes(p)).sum();
        (params, params, opt)
    }

    /// Attaches a fresh meter preloaded with the static bytes.
    pub fn enable_meter(&mut self) -> Arc<MemoryMeter> {
        let meter = Arc::new(MemoryMeter::new());
        let (p, g, o) = self.static_bytes();
        meter.add(p + g + o);
        self.meter = Some(Arc::clone(&meter));
        meter
    }

    fn new_tape(&self) -> Tape {
        match &self.meter {
            Some(m) => Tape::new().with_meter(Arc::clone(m), self.precision()),
            None => Tape::new().with_meter(Arc::new(MemoryMeter::new()), self.precision()),
        }
    }

    pub fn lr(&self) -> f64 {
        let plan = &self.config.train;
        let base = if self.total_steps == 0 {
            plan.lr_start
        } else {
            cosine_lr(self.step, self.total_steps, plan.lr_start, plan.lr_end)
        };
        if plan.uses_warmup() {
            base * warmup_factor(self.epoch, plan.hgb_warmup_epochs)
        } else {
            base
        }
    }

    fn stored(&self, t: Tensor4) -> Arc<Tensor4> {
        let mut t = t;
        t.round_to(self.precision());
        Arc::new(t)
    }

    fn prepare_input(&self, x: &Tensor4, labels: &[usize]) -> Result<Arc<Tensor4>> {
        let [c, h, w] = self.config.arch.input;
        let s = x.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::shape("train_step", "input sample size", c * h * w, s.per_sample()));
        }
        if labels.len() != s.b {
            return Err(Error::shape("train_step", "label count", s.b, labels.len()));
        }
        let x = if self.config.arch.stem_avg_pool {
            ops::avg_pool_2x2(x)?
        } else {
            x.clone()
        };
        Ok(self.stored(x))
    }

    /// Forward of group `gi` on the detached input `h`. Returns the exit
    /// loss, the exit logits and the forwarded output.
    fn forward_group(
        &mut self,
        gi: usize,
        tape: &mut Tape,
        h: Arc<Tensor4>,
        labels: &[usize],
        train: bool,
    ) -> Result<(Var, Tensor4, Tensor4)> {
        let range = self.groups[gi].range.clone();
        let params = &self.groups[gi].params;
        let mut mode = if train {
            Mode::Train(&mut self.dropout_rng)
        } else {
            Mode::Eval
        };
        let mut x = tape.input(h, false);
        for l in range.clone() {
            let layer = &mut self.layers[l];
            if let Some(fal) = &layer.fal {
                x = fal.forward(tape, params, &x)?;
            }
            let exit = l + 1 == range.end;
            let out = layer.block.forward(tape, params, &x, &mut mode, !exit)?;
            if exit {
                let head = layer
                    .head
                    .as_ref()
                    .ok_or_else(|| Error::invalid("train_step", format!("group exit {l} has no head")))?;
                let (_, logits) = head.forward(tape, params, &out.f)?;
                let loss = tape.softmax_cross_entropy(&logits, labels)?;
                return Ok((loss, logits.value().clone(), out.h.value().clone()));
            }
            x = out.h;
        }
        Err(Error::invalid("train_step", "empty group"))
    }

    fn finish_group(&mut self, gi: usize, mut tape: Tape, loss: Var, backward: bool, apply: bool, lr: f64) -> Result<()> {
        if backward {
            let group = &mut self.groups[gi];
            tape.backward(&loss, &mut group.params)?;
            if apply {
                group.opt.step(&mut group.params, lr)?;
                if self.config.train.precision == Precision::F32 {
                    group
                        .params
                        .iter_mut()
                        .for_each(|p| Arc::make_mut(&mut p.value).round_to(Precision::F32));
                }
            }
        }
        tape.clear();
        self.cycles += 1;
        Ok(())
    }

    fn run_groups(
        &mut self,
        x: &Tensor4,
        labels: &[usize],
        batch: usize,
        interleaved: bool,
        only: Option<usize>,
        apply: bool,
    ) -> Result<StepReport> {
        let lr = self.lr();
        let mut h = self.prepare_input(x, labels)?;
        let mut report = StepReport {
            batch,
            ..StepReport::default()
        };
        let mut pending = Vec::new();
        for gi in 0..self.groups.len() {
            let mut tape = self.new_tape();
            let (loss, logits, next) = self.forward_group(gi, &mut tape, h, labels, true)?;
            let value = loss.scalar();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    layer: self.groups[gi].range.end - 1,
                    batch,
                    value,
                });
            }
            report.losses.push(value);
            report.correct.push(count_correct(&logits, labels));
            report.trace_bytes.push(tape.resident_bytes());
            h = self.stored(next);
            let backward = only.is_none_or(|o| o == gi);
            if interleaved {
                self.finish_group(gi, tape, loss, backward, apply, lr)?;
            } else {
                pending.push((gi, tape, loss, backward));
            }
        }
        for (gi, tape, loss, backward) in pending {
            self.finish_group(gi, tape, loss, backward, apply, lr)?;
        }
        if apply {
            self.step += 1;
        }
        Ok(report)
    }

    /// One optimisation step using the configured execution mode.
    pub fn train_step(&mut self, x: &Tensor4, labels: &[usize], batch: usize) -> Result<StepReport> {
        match self.config.train.execution {
            Execution::Standard => self.train_step_hgb(x, labels, batch),
            Execution::Interleaved => self.train_step_interleaved(x, labels, batch),
        }
    }

    /// Standard execution at the configured block size: every group runs its
    /// forward pass, then each group back-propagates, steps and releases.
    pub fn train_step_hgb(&mut self, x: &Tensor4, labels: &[usize], batch: usize) -> Result<StepReport> {
        self.run_groups(x, labels, batch, false, None, true)
    }

    /// Forward, loss, backward, step and release one group at a time.
    pub fn train_step_interleaved(&mut self, x: &Tensor4, labels: &[usize], batch: usize) -> Result<StepReport> {
        self.run_groups(x, labels, batch, true, None, true)
    }

    /// Strictly layer-wise step (block size 1), written out per layer.
    pub fn train_step_greedy(&mut self, x: &Tensor4, labels: &[usize], batch: usize) -> Result<StepReport> {
        if self.groups.len() != self.layers.len() {
            return Err(Error::invalid("train_step_greedy", "requires hgb_m = 1"));
        }
        let lr = self.lr();
        let mut h = self.prepare_input(x, labels)?;
        let mut report = StepReport {
            batch,
            ..StepReport::default()
        };
        let mut traces = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let mut tape = self.new_tape();
            let params = &self.groups[l].params;
            let layer = &mut self.layers[l];
            let mut x = tape.input(h, false);
            if let Some(fal) = &layer.fal {
                x = fal.forward(&mut tape, params, &x)?;
            }
            let out = layer
                .block
                .forward(&mut tape, params, &x, &mut Mode::Train(&mut self.dropout_rng), false)?;
            let head = layer.head.as_ref().ok_or_else(|| Error::invalid("train_step_greedy", "missing head"))?;
            let (_, logits) = head.forward(&mut tape, params, &out.f)?;
            let loss = tape.softmax_cross_entropy(&logits, labels)?;
            if !loss.scalar().is_finite() {
                return Err(Error::NonFiniteLoss {
                    layer: l,
                    batch,
                    value: loss.scalar(),
                });
            }
            report.losses.push(loss.scalar());
            report.correct.push(count_correct(logits.value(), labels));
            report.trace_bytes.push(tape.resident_bytes());
            let next = out.h.value().clone();
            h = self.stored(next);
            traces.push((tape, loss));
        }
        for (l, (tape, loss)) in traces.into_iter().enumerate() {
            self.finish_group(l, tape, loss, true, true, lr)?;
        }
        self.step += 1;
        Ok(report)
    }

    /// Accumulates gradients without stepping. With `only = Some(g)` just
    /// group `g`'s loss is back-propagated.
    pub fn accumulate_gradients(&mut self, x: &Tensor4, labels: &[usize], only: Option<usize>) -> Result<StepReport> {
        self.run_groups(x, labels, 0, false, only, false)
    }

    pub fn zero_grads(&mut self) {
        self.groups.iter_mut().for_each(|g| g.params.zero_grad());
    }

    /// Eval-mode logits of every head on `x`.
    pub fn head_logits(&mut self, x: &Tensor4) -> Result<Vec<Tensor4>> {
        let [c, h, w] = self.config.arch.input;
        if (x.shape().c, x.shape().h, x.shape().w) != (c, h, w) {
            return Err(Error::shape("evaluate", "input sample size", c * h * w, x.shape().per_sample()));
        }
        let mut cur = if self.config.arch.stem_avg_pool {
            ops::avg_pool_2x2(x)?
        } else {
            x.clone()
        };
        cur.round_to(self.precision());
        let mut out = Vec::new();
        for gi in 0..self.groups.len() {
            let range = self.groups[gi].range.clone();
            let params = &self.groups[gi].params;
            let mut tape = Tape::inference();
            let mut v = tape.input(Arc::new(cur), false);
            for l in range {
                let layer = &mut self.layers[l];
                if let Some(fal) = &layer.fal {
                    v = fal.forward(&mut tape, params, &v)?;
                }
                let o = layer.block.forward(&mut tape, params, &v, &mut Mode::Eval, true)?;
                if let Some(head) = &layer.head {
                    let (_, logits) = head.forward(&mut tape, params, &o.f)?;
                    out.push(logits.value().clone());
                }
                v = o.h;
            }
            cur = v.value().clone();
            cur.round_to(self.precision());
        }
        Ok(out)
    }

    /// Input shape of one batch of `n` samples.
    pub fn batch_shape(&self, n: usize) -> Shape4 {
        let [c, h, w] = self.config.arch.input;
        Shape4::new(n, c, h, w)
    }
}
