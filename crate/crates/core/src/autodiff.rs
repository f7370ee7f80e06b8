//! Recorded reverse differentiation scoped to one gradient group.
//!
//! A [`Tape`] records the ops of one forward segment together with the
//! tensors their backward needs. [`Tape::backward`] consumes the trace:
//! afterwards the tape is empty and every [`Var`] it handed out is stale.
//! Parameters live in a [`ParamSet`] owned by the same [`GradientGroup`], so
//! a backward pass can only ever write gradients of its own group.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::meter::MemoryMeter;
use crate::ops;
use crate::tensor::{Precision, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor4>,
    pub grad: Tensor4,
}

/// Named parameters of one gradient group and their gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> ParamId {
        let grad = Tensor4::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a value in place (clones first if a trace still holds it).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor4) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("ParamSet::set_value", "numel", p.value.len(), value.len()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grads_all_zero(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_all_zero())
    }
}

/// Handle to a value produced on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    generation: u64,
    value: Arc<Tensor4>,
}

impl Var {
    pub fn value(&self) -> &Tensor4 {
        &self.value
    }

    pub fn arc(&self) -> &Arc<Tensor4> {
        &self.value
    }

    pub fn shape(&self) -> Shape4 {
        self.value.shape()
    }

    /// The scalar held by a `1×1×1×1` var.
    pub fn scalar(&self) -> f64 {
        self.value.data()[0]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d,
    Relu,
    RmsPool,
    AvgPool2,
    RmsNorm { rms: Vec<f64> },
    BatchNormTrain { inv_std: Vec<f64> },
    BatchNormEval { inv_std: Vec<f64> },
    Dropout,
    GlobalAvgPool,
    Linear { has_bias: bool },
    ChannelProject,
    RegionEnergy { scale: usize },
    Concat { widths: Vec<usize> },
    AddChannel,
    SoftmaxCe { labels: Vec<usize> },
    Square,
    Sum,
    Add,
    Scale { k: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    saved: Vec<Arc<Tensor4>>,
    shape: Shape4,
    needs_grad: bool,
}

/// Input gradients returned by [`Tape::backward`] for leaves created with
/// `requires_grad`.
#[derive(Debug, Default)]
pub struct Gradients {
    generation: u64,
    leaves: HashMap<usize, Tensor4>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var) -> Option<&Tensor4> {
        if var.generation != self.generation {
            return None;
        }
        self.leaves.get(&var.id)
    }
}

/// Operation trace of one forward segment.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
    recording: bool,
    precision: Precision,
    meter: Option<Arc<MemoryMeter>>,
    resident: HashSet<usize>,
    resident_bytes: usize,
    param_ptrs: HashSet<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape with 64-bit byte accounting and no meter.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            generation: 0,
            recording: true,
            precision: Precision::F64,
            meter: None,
            resident: HashSet::new(),
            resident_bytes: 0,
            param_ptrs: HashSet::new(),
        }
    }

    /// A tape that evaluates ops without recording anything.
    pub fn inference() -> Self {
        let mut tape = Tape::new();
        tape.recording = false;
        tape
    }

    pub fn with_meter(mut self, meter: Arc<MemoryMeter>, precision: Precision) -> Self {
        self.meter = Some(meter);
        self.precision = precision;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of distinct non-parameter tensors held for the backward pass.
    pub fn resident_bytes(&self) -> usize {
        self.resident_bytes
    }

    /// Drops the trace and invalidates all outstanding vars.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_ptrs.clear();
        self.resident.clear();
        if let Some(m) = &self.meter {
            m.sub(self.resident_bytes);
        }
        self.resident_bytes = 0;
        self.generation += 1;
    }

    fn save(&mut self, t: &Arc<Tensor4>) -> Arc<Tensor4> {
        let key = Arc::as_ptr(t) as usize;
        if !self.param_ptrs.contains(&key) && self.resident.insert(key) {
            let bytes = t.bytes(self.precision);
            self.resident_bytes += bytes;
            if let Some(m) = &self.meter {
                m.add(bytes);
            }
        }
        Arc::clone(t)
    }

    fn push(&mut self, op: Op, inputs: &[&Var], saved: Vec<Arc<Tensor4>>, value: Tensor4) -> Var {
        let value = Arc::new(value);
        if !self.recording {
            return Var {
                id: usize::MAX,
                generation: self.generation,
                value,
            };
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.id].needs_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            saved,
            shape: value.shape(),
            needs_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
            value,
        }
    }

    fn check(&self, vars: &[&Var]) -> Result<()> {
        if !self.recording {
            return Ok(());
        }
        for v in vars {
            if v.generation != self.generation || v.id >= self.nodes.len() {
                return Err(Error::Trace("var does not belong to the current trace".into()));
            }
        }
        Ok(())
    }

    /// Starts a trace from `value`. With `requires_grad` false the leaf acts
    /// as a detach point: nothing upstream of it can receive gradient.
    pub fn input(&mut self, value: Arc<Tensor4>, requires_grad: bool) -> Var {
        if !self.recording {
            return Var {
                id: usize::MAX,
                generation: self.generation,
                value,
            };
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            saved: Vec::new(),
            shape: value.shape(),
            needs_grad: requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
            value,
        }
    }

    /// Value-identical copy of `v` on this tape with no gradient path back.
    pub fn detach(&mut self, v: &Var) -> Var {
        self.input(Arc::clone(&v.value), false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let value = Arc::clone(&params.get(id).value);
        if !self.recording {
            return Var {
                id: usize::MAX,
                generation: self.generation,
                value,
            };
        }
        self.param_ptrs.insert(Arc::as_ptr(&value) as usize);
        self.nodes.push(Node {
            op: Op::Param(id),
            inputs: Vec::new(),
            saved: Vec::new(),
            shape: value.shape(),
            needs_grad: true,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
            value,
        }
    }

    pub fn conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let y = ops::conv2d_forward(&x.value, &w.value, &b.value)?;
        let saved = if self.recording {
            vec![self.save(&x.value), self.save(&w.value)]
        } else {
            Vec::new()
        };
        Ok(self.push(Op::Conv2d, &[x, w, b], saved, y))
    }

    pub fn relu(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let y = Arc::new(ops::relu(&x.value));
        if !self.recording {
            return Ok(Var {
                id: usize::MAX,
                generation: self.generation,
                value: y,
            });
        }
        let saved = vec![self.save(&y)];
        let needs_grad = self.nodes[x.id].needs_grad;
        self.nodes.push(Node {
            op: Op::Relu,
            inputs: vec![x.id],
            saved,
            shape: y.shape(),
            needs_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
            value: y,
        })
    }

    pub fn rms_pool(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let y = Arc::new(ops::rms_pool(&x.value)?);
        if !self.recording {
            return Ok(Var {
                id: usize::MAX,
                generation: self.generation,
                value: y,
            });
        }
        let saved = vec![self.save(&x.value), self.save(&y)];
        let needs_grad = self.nodes[x.id].needs_grad;
        self.nodes.push(Node {
            op: Op::RmsPool,
            inputs: vec![x.id],
            saved,
            shape: y.shape(),
            needs_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
            value: y,
        })
    }

    pub fn avg_pool2(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let y = ops::avg_pool_2x2(&x.value)?;
        Ok(self.push(Op::AvgPool2, &[x], Vec::new(), y))
    }

    pub fn rms_norm(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let (y, rms) = ops::rms_norm_forward(&x.value);
        let saved = if self.recording {
            vec![self.save(&x.value)]
        } else {
            Vec::new()
        };
        Ok(self.push(Op::RmsNorm { rms }, &[x], saved, y))
    }

    /// Training-mode batch norm; running statistics are updated in place.
    pub fn batch_norm_train(
        &mut self,
        x: &Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        momentum: f64,
    ) -> Result<Var> {
        self.check(&[x])?;
        let (y, trace) = ops::batch_norm_train(&x.value, running_mean, running_var, momentum);
        let saved = if self.recording {
            vec![self.save(&Arc::new(trace.normalized))]
        } else {
            Vec::new()
        };
        Ok(self.push(
            Op::BatchNormTrain {
                inv_std: trace.inv_std,
            },
            &[x],
            saved,
            y,
        ))
    }

    pub fn batch_norm_eval(&mut self, x: &Var, running_mean: &[f64], running_var: &[f64]) -> Result<Var> {
        self.check(&[x])?;
        let y = ops::batch_norm_eval(&x.value, running_mean, running_var);
        let inv_std = running_var.iter().map(|v| 1.0 / (v + ops::BN_EPS).sqrt()).collect();
        Ok(self.push(Op::BatchNormEval { inv_std }, &[x], Vec::new(), y))
    }

    /// Multiplies by a precomputed inverted-dropout mask.
    pub fn dropout(&mut self, x: &Var, mask: Tensor4) -> Result<Var> {
        self.check(&[x])?;
        if mask.shape() != x.shape() {
            return Err(Error::shape("dropout", "mask numel", x.value.len(), mask.len()));
        }
        let mut y = (*x.value).clone();
        for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        let saved = if self.recording {
            vec![self.save(&Arc::new(mask))]
        } else {
            Vec::new()
        };
        Ok(self.push(Op::Dropout, &[x], saved, y))
    }

    pub fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let y = ops::global_avg_pool(&x.value);
        Ok(self.push(Op::GlobalAvgPool, &[x], Vec::new(), y))
    }

    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.check(&ins)?;
        let y = ops::linear_forward(&x.value, &w.value, b.map(|b| &*b.value))?;
        let saved = if self.recording {
            vec![self.save(&x.value), self.save(&w.value)]
        } else {
            Vec::new()
        };
        Ok(self.push(Op::Linear { has_bias: b.is_some() }, &ins, saved, y))
    }

    pub fn channel_project(&mut self, x: &Var, proj: &Var) -> Result<Var> {
        self.check(&[x, proj])?;
        let y = ops::channel_project_forward(&x.value, &proj.value)?;
        let saved = if self.recording {
            vec![self.save(&x.value), self.save(&proj.value)]
        } else {
            Vec::new()
        };
        Ok(self.push(Op::ChannelProject, &[x, proj], saved, y))
    }

    pub fn region_energy(&mut self, x: &Var, scale: usize) -> Result<Var> {
        self.check(&[x])?;
        let y = ops::region_energy(&x.value, scale)?;
        let saved = if self.recording {
            vec![self.save(&x.value)]
        } else {
            Vec::new()
        };
        Ok(self.push(Op::RegionEnergy { scale }, &[x], saved, y))
    }

    /// Concatenates `(B, D_i, 1, 1)` feature matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Var> = parts.iter().collect();
        self.check(&refs)?;
        let batch = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .shape()
            .b;
        let widths: Vec<usize> = parts.iter().map(|p| p.shape().per_sample()).collect();
        for p in parts {
            if p.shape().b != batch {
                return Err(Error::shape("concat", "batch", batch, p.shape().b));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total);
        for b in 0..batch {
            for p in parts {
                data.extend_from_slice(p.value.sample(b));
            }
        }
        let y = Tensor4::from_raw(Shape4::matrix(batch, total), data);
        Ok(self.push(Op::Concat { widths }, &refs, Vec::new(), y))
    }

    /// `h + Δ` with `Δ: (B, C, 1, 1)` broadcast over space.
    pub fn add_channel(&mut self, h: &Var, delta: &Var) -> Result<Var> {
        self.check(&[h, delta])?;
        let (sh, sd) = (h.shape(), delta.shape());
        if sd.b != sh.b || sd.per_sample() != sh.c {
            return Err(Error::shape("add_channel", "channels", sh.c, sd.per_sample()));
        }
        let mut y = (*h.value).clone();
        let hw = sh.spatial();
        for (plane, &d) in y.data_mut().chunks_exact_mut(hw).zip(delta.value.data()) {
            plane.iter_mut().for_each(|v| *v += d);
        }
        Ok(self.push(Op::AddChannel, &[h, delta], Vec::new(), y))
    }

    /// Mean softmax cross-entropy as a `1×1×1×1` var.
    pub fn softmax_cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let (loss, probs) = ops::softmax_cross_entropy(&logits.value, labels)?;
        let saved = if self.recording {
            vec![self.save(&Arc::new(probs))]
        } else {
            Vec::new()
        };
        Ok(self.push(
            Op::SoftmaxCe {
                labels: labels.to_vec(),
            },
            &[logits],
            saved,
            Tensor4::full(Shape4::scalar(), loss),
        ))
    }

    pub fn square(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let y = x.value.map(|v| v * v);
        let saved = if self.recording {
            vec![self.save(&x.value)]
        } else {
            Vec::new()
        };
        Ok(self.push(Op::Square, &[x], saved, y))
    }

    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let y = Tensor4::full(Shape4::scalar(), x.value.sum());
        Ok(self.push(Op::Sum, &[x], Vec::new(), y))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check(&[a, b])?;
        if a.shape() != b.shape() {
            return Err(Error::shape("add", "numel", a.value.len(), b.value.len()));
        }
        let mut y = (*a.value).clone();
        y.add_assign(&b.value);
        Ok(self.push(Op::Add, &[a, b], Vec::new(), y))
    }

    pub fn scale(&mut self, x: &Var, k: f64) -> Result<Var> {
        self.check(&[x])?;
        let y = x.value.map(|v| v * k);
        Ok(self.push(Op::Scale { k }, &[x], Vec::new(), y))
    }

    /// Back-propagates a scalar `loss` through the trace, accumulating into
    /// `params`, then clears the trace.
    pub fn backward(&mut self, loss: &Var, params: &mut ParamSet) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Trace("inference tape has no trace".into()));
        }
        self.check(&[loss])?;
        if loss.value.len() != 1 {
            return Err(Error::shape("backward", "loss numel", 1, loss.value.len()));
        }
        let generation = self.generation;
        let mut grads: Vec<Option<Tensor4>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor4::full(Shape4::scalar(), 1.0));
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let need = |k: usize| self.nodes[node.inputs[k]].needs_grad;
            let mut out: Vec<(usize, Tensor4)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, g);
                }
                Op::Param(pid) => {
                    let Some(p) = params.params.get_mut(pid.0) else {
                        return Err(Error::Trace(format!("parameter #{} is not part of this group", pid.0)));
                    };
                    if p.grad.shape() != g.shape() {
                        return Err(Error::Trace(format!("parameter {} is not part of this group", p.name)));
                    }
                    p.grad.add_assign(&g);
                }
                Op::Conv2d => {
                    let cg = ops::conv2d_backward(&node.saved[0], &node.saved[1], &g)?;
                    if need(0) {
                        out.push((node.inputs[0], cg.input));
                    }
                    out.push((node.inputs[1], cg.weight));
                    out.push((node.inputs[2], cg.bias.reshape(self.nodes[node.inputs[2]].shape)?));
                }
                Op::Relu => out.push((node.inputs[0], ops::relu_backward(&node.saved[0], &g))),
                Op::RmsPool => out.push((node.inputs[0], ops::rms_pool_backward(&node.saved[0], &node.saved[1], &g))),
                Op::AvgPool2 => {
                    let s = self.nodes[node.inputs[0]].shape;
                    out.push((node.inputs[0], ops::avg_pool_2x2_backward(s, &g)));
                }
                Op::RmsNorm { rms } => out.push((node.inputs[0], ops::rms_norm_backward(&node.saved[0], rms, &g))),
                Op::BatchNormTrain { inv_std } => {
                    let trace = ops::BatchNormTrace {
                        normalized: (*node.saved[0]).clone(),
                        inv_std: inv_std.clone(),
                    };
                    out.push((node.inputs[0], ops::batch_norm_backward(&trace, &g)));
                }
                Op::BatchNormEval { inv_std } => {
                    let mut gx = g;
                    let hw = gx.shape().spatial();
                    let c = gx.shape().c;
                    for (i, plane) in gx.data_mut().chunks_exact_mut(hw).enumerate() {
                        let k = inv_std[i % c];
                        plane.iter_mut().for_each(|v| *v *= k);
                    }
                    out.push((node.inputs[0], gx));
                }
                Op::Dropout => {
                    let mut gx = g;
                    for (v, m) in gx.data_mut().iter_mut().zip(node.saved[0].data()) {
                        *v *= m;
                    }
                    out.push((node.inputs[0], gx));
                }
                Op::GlobalAvgPool => {
                    let s = self.nodes[node.inputs[0]].shape;
                    out.push((node.inputs[0], ops::global_avg_pool_backward(s, &g)));
                }
                Op::Linear { has_bias } => {
                    let lg = ops::linear_backward(&node.saved[0], &node.saved[1], &g);
                    if need(0) {
                        out.push((node.inputs[0], lg.input));
                    }
                    if need(1) {
                        out.push((node.inputs[1], lg.weight));
                    }
                    if *has_bias {
                        out.push((node.inputs[2], lg.bias.reshape(self.nodes[node.inputs[2]].shape)?));
                    }
                }
                Op::ChannelProject => {
                    let (gx, gp) = ops::channel_project_backward(&node.saved[0], &node.saved[1], &g);
                    if need(0) {
                        out.push((node.inputs[0], gx));
                    }
                    if need(1) {
                        out.push((node.inputs[1], gp));
                    }
                }
                Op::RegionEnergy { scale } => {
                    out.push((node.inputs[0], ops::region_energy_backward(&node.saved[0], *scale, &g)?));
                }
                Op::Concat { widths } => {
                    let batch = g.shape().b;
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (k, &w) in widths.iter().enumerate() {
                        let mut part = Vec::with_capacity(batch * w);
                        for b in 0..batch {
                            part.extend_from_slice(&g.data()[b * total + offset..b * total + offset + w]);
                        }
                        offset += w;
                        let shape = self.nodes[node.inputs[k]].shape;
                        out.push((node.inputs[k], Tensor4::from_raw(shape, part)));
                    }
                }
                Op::AddChannel => {
                    let hw = g.shape().spatial();
                    let ds = self.nodes[node.inputs[1]].shape;
                    let data = g.data().chunks_exact(hw).map(|p| p.iter().sum()).collect();
                    if need(1) {
                        out.push((node.inputs[1], Tensor4::from_raw(ds, data)));
                    }
                    out.push((node.inputs[0], g));
                }
                Op::SoftmaxCe { labels } => {
                    let up = g.data()[0];
                    let mut gx = (*node.saved[0]).clone();
                    let k = gx.shape().per_sample();
                    let batch = labels.len() as f64;
                    for (row, &y) in gx.data_mut().chunks_exact_mut(k).zip(labels) {
                        row[y] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= up / batch);
                    }
                    out.push((node.inputs[0], gx));
                }
                Op::Square => {
                    let mut gx = g;
                    for (v, x) in gx.data_mut().iter_mut().zip(node.saved[0].data()) {
                        *v *= 2.0 * x;
                    }
                    out.push((node.inputs[0], gx));
                }
                Op::Sum => {
                    let s = self.nodes[node.inputs[0]].shape;
                    out.push((node.inputs[0], Tensor4::full(s, g.data()[0])));
                }
                Op::Add => {
                    out.push((node.inputs[0], g.clone()));
                    out.push((node.inputs[1], g));
                }
                Op::Scale { k } => {
                    let mut gx = g;
                    gx.scale(*k);
                    out.push((node.inputs[0], gx));
                }
            }
            for (target, t) in out {
                if !self.nodes[target].needs_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        self.clear();
        Ok(Gradients { generation, leaves })
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        if let Some(m) = &self.meter {
            m.sub(self.resident_bytes);
        }
    }
}

/// Parameters plus the trace that may write their gradients.
#[derive(Debug, Default)]
pub struct GradientGroup {
    pub params: ParamSet,
    pub tape: Tape,
}

impl GradientGroup {
    pub fn new(params: ParamSet, tape: Tape) -> Self {
        GradientGroup { params, tape }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(&self.params, id)
    }

    pub fn backward(&mut self, loss: &Var) -> Result<Gradients> {
        self.tape.backward(loss, &mut self.params)
    }
}
