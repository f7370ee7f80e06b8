//! Analytic peak-memory model.
//!
//! Memory is engine-level tensor bytes: parameters, their gradients,
//! optimizer state, and the tensors each traced op keeps for its backward
//! pass. Transient values that no backward rule holds are not counted.
//!
//! Residency per op while recording:
//!
//! | op                  | keeps                                   |
//! |---------------------|-----------------------------------------|
//! | conv2d              | its input                               |
//! | relu                | its output                              |
//! | rms_pool            | its input and output                    |
//! | dropout             | the mask                                |
//! | rms_norm            | its input                               |
//! | batch_norm (train)  | the normalised output (a fresh copy)    |
//! | linear              | its input                               |
//! | channel_project     | its input                               |
//! | region_energy       | its input                               |
//! | softmax_xent        | the class probabilities                 |
//! | gap, concat, add    | nothing                                 |
//!
//! Parameters are never counted as activations, and a tensor kept by two
//! ops counts once. The block tail (pool, dropout, norm) of a group's exit
//! layer runs untraced because nothing behind it receives gradient.
//!
//! Standard execution keeps every group's trace until all groups have run
//! their forward pass; interleaved execution releases each trace before
//! the next group starts.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::blocks::NormKind;
use crate::config::{ArchSpec, Execution, OptimizerKind, TrainPlan};
use crate::error::{Error, Result};
use crate::tensor::Precision;
use crate::training::TrainState;

/// One tensor held for the backward pass, in elements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resident {
    pub layer: usize,
    pub what: String,
    pub elems: usize,
    /// Part of the goodness-head graph rather than the block chain.
    pub head: bool,
}

/// Tensors kept by layer `l` when it sits in a traced group.
pub fn layer_residents(arch: &ArchSpec, l: usize, batch: usize, has_fal: bool, exit: bool) -> Vec<Resident> {
    let spec = &arch.block_specs()[l];
    let (h, w) = arch.block_spatial()[l];
    let (cin, c) = (spec.in_channels, spec.out_channels);
    let (ho, wo) = if spec.has_pool { (h / 2, w / 2) } else { (h, w) };
    let mut out = Vec::new();
    let mut push = |what: &str, elems: usize, head: bool| {
        out.push(Resident {
            layer: l,
            what: what.to_string(),
            elems,
            head,
        })
    };
    if has_fal {
        push("fal.gap", batch * cin, false);
        push("fal.hidden", batch * arch.fal_hidden, false);
    }
    push("conv.input", batch * cin * h * w, false);
    push("relu.output", batch * c * h * w, false);
    if exit {
        let g = &spec.goodness;
        let n = g.projections(c);
        if n > 0 {
            push("head.projection", batch * n * h * w, true);
        }
        push("head.goodness", batch * g.dim(c), true);
        push("head.probs", batch * arch.num_classes, true);
    } else {
        let tail = batch * c * ho * wo;
        if spec.has_pool {
            push("pool.output", tail, false);
        }
        let dropout = spec.dropout_p > 0.0;
        if dropout {
            push("dropout.mask", tail, false);
        }
        match spec.norm {
            NormKind::RmsNorm if dropout => push("norm.input", tail, false),
            NormKind::RmsNorm => {}
            NormKind::BatchNorm => push("norm.normalized", tail, false),
        }
    }
    out
}

/// Parameter count of layer `l`'s block, FAL and head.
pub fn layer_params(arch: &ArchSpec, l: usize, has_fal: bool, exit: bool) -> usize {
    let spec = &arch.block_specs()[l];
    let (cin, c) = (spec.in_channels, spec.out_channels);
    let mut n = c * cin * 9 + c;
    if has_fal {
        n += 2 * cin * arch.fal_hidden;
    }
    if exit {
        let g = &spec.goodness;
        n += g.projections(c) * c + g.dim(c) * arch.num_classes + arch.num_classes;
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub layers: Range<usize>,
    pub param_bytes: usize,
    pub activation_bytes: usize,
    pub head_bytes: usize,
}

impl GroupEstimate {
    pub fn trace_bytes(&self) -> usize {
        self.activation_bytes + self.head_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub m: usize,
    pub batch: usize,
    pub execution: Execution,
    pub param_bytes: usize,
    pub grad_bytes: usize,
    pub optimizer_bytes: usize,
    /// Block-chain tensors resident at the peak.
    pub activation_bytes: usize,
    /// Goodness-head tensors resident at the peak.
    pub head_bytes: usize,
    pub peak_bytes: usize,
    pub groups: Vec<GroupEstimate>,
}

impl MemoryEstimate {
    pub fn static_bytes(&self) -> usize {
        self.param_bytes + self.grad_bytes + self.optimizer_bytes
    }

    pub fn resident_bytes(&self) -> usize {
        self.activation_bytes + self.head_bytes
    }
}

/// Peak bytes for `arch` trained in blocks of `m` under `execution`.
pub fn estimate_peak(
    arch: &ArchSpec,
    m: usize,
    optimizer: OptimizerKind,
    execution: Execution,
    batch: usize,
    precision: Precision,
) -> Result<MemoryEstimate> {
    let blocks = arch.num_blocks();
    if m == 0 || !blocks.is_multiple_of(m) {
        return Err(Error::invalid("estimate_peak", format!("block size {m} does not divide {blocks} blocks")));
    }
    let bytes = precision.bytes();
    let fal = arch.fal_boundaries(m);
    let mut groups = Vec::new();
    for range in arch.groups(m) {
        let mut g = GroupEstimate {
            layers: range.clone(),
            param_bytes: 0,
            activation_bytes: 0,
            head_bytes: 0,
        };
        for l in range.clone() {
            let exit = l + 1 == range.end;
            let has_fal = fal.contains(&l);
            g.param_bytes += layer_params(arch, l, has_fal, exit) * bytes;
            for r in layer_residents(arch, l, batch, has_fal, exit) {
                if r.head {
                    g.head_bytes += r.elems * bytes;
                } else {
                    g.activation_bytes += r.elems * bytes;
                }
            }
        }
        groups.push(g);
    }
    let param_bytes: usize = groups.iter().map(|g| g.param_bytes).sum();
    let optimizer_bytes = match optimizer {
        OptimizerKind::Sgd => param_bytes,
        OptimizerKind::Adam | OptimizerKind::Adamw => 2 * param_bytes,
    };
    let (activation_bytes, head_bytes) = match execution {
        Execution::Standard => (
            groups.iter().map(|g| g.activation_bytes).sum(),
            groups.iter().map(|g| g.head_bytes).sum(),
        ),
        Execution::Interleaved => groups
            .iter()
            .max_by_key(|g| g.trace_bytes())
            .map(|g| (g.activation_bytes, g.head_bytes))
            .unwrap_or((0, 0)),
    };
    Ok(MemoryEstimate {
        m,
        batch,
        execution,
        param_bytes,
        grad_bytes: param_bytes,
        optimizer_bytes,
        activation_bytes,
        head_bytes,
        peak_bytes: 2 * param_bytes + optimizer_bytes + activation_bytes + head_bytes,
        groups,
    })
}

/// Estimate for a training plan.
pub fn estimate_plan(arch: &ArchSpec, plan: &TrainPlan, batch: usize) -> Result<MemoryEstimate> {
    estimate_peak(arch, plan.hgb_m, plan.optimizer, plan.execution, batch, plan.precision)
}

/// High-water mark of the state's meter.
pub fn measure_peak(state: &TrainState) -> Result<usize> {
    state
        .meter
        .as_ref()
        .map(|m| m.peak())
        .ok_or_else(|| Error::invalid("measure_peak", "memory meter is not enabled"))
}

/// `m,execution,batch,params,grads,optimizer,activations,heads,peak` rows.
pub fn sweep_csv(arch: &ArchSpec, plan: &TrainPlan, batch: usize, ms: &[usize]) -> Result<String> {
    let mut out = String::from("m,execution,batch,param_bytes,grad_bytes,optimizer_bytes,activation_bytes,head_bytes,peak_bytes\n");
    for &m in ms {
        for exec in [Execution::Standard, Execution::Interleaved] {
            let e = estimate_peak(arch, m, plan.optimizer, exec, batch, plan.precision)?;
            let exec_name = match exec {
                Execution::Standard => "standard",
                Execution::Interleaved => "interleaved",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                m, exec_name, batch, e.param_bytes, e.grad_bytes, e.optimizer_bytes, e.activation_bytes, e.head_bytes, e.peak_bytes
            ));
        }
    }
    Ok(out)
}
