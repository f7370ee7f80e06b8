//! Epoch loop, evaluation and the fusion stage.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::Split;
use crate::data::{shuffled, Augment, Dataset, Loader, Normalizer};
use crate::diagnostics::LayerCurve;
use crate::error::{Error, Result};
use crate::fusion::{self, FusionHead};
use crate::ops;
use crate::tensor::Tensor4;
use crate::training::TrainState;

const EVAL_BATCH: usize = 250;
const PREFETCH: usize = 2;

/// Eval-mode logits of every head over a whole dataset, in sample order.
pub fn logit_stack(state: &mut TrainState, data: &Dataset) -> Result<Vec<Tensor4>> {
    let [c, h, w] = state.config.arch.input;
    if data.sample_shape() != [c, h, w] {
        return Err(Error::shape("evaluate", "sample size", c * h * w, data.images.shape().per_sample()));
    }
    if data.num_classes != state.config.arch.num_classes {
        return Err(Error::invalid(
            "evaluate",
            format!("dataset has {} classes, network has {}", data.num_classes, state.config.arch.num_classes),
        ));
    }
    let norm = state.input_norm.clone().unwrap_or_else(|| Normalizer::identity(c));
    let heads = state.head_layers().len();
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); heads];
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let mut x = data.images.slice_batch(start, end);
        norm.normalize(&mut x);
        for (p, t) in parts.iter_mut().zip(state.head_logits(&x)?) {
            p.extend_from_slice(t.data());
        }
    }
    let k = state.config.arch.num_classes;
    parts
        .into_iter()
        .map(|v| Tensor4::from_vec(crate::tensor::Shape4::matrix(data.len(), k), v))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub top1: f64,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub layers: Vec<LayerScore>,
    /// Best Pred: head chosen by accuracy on the selection split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_pred_layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_pred_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fused_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fused_ce: Option<f64>,
}

impl EvalReport {
    pub fn top1(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.top1).collect()
    }

    pub fn curve(&self, name: &str) -> Result<LayerCurve> {
        LayerCurve::new(name, self.top1())
    }
}

/// Scores cached logits: per-head top-1 and CE, plus fused scores when the
/// state carries fusion weights. `selection` gives the accuracies used to
/// pick the Best Pred head (defaults to this split's own).
pub fn score_stack(state: &TrainState, stack: &[Tensor4], labels: &[usize], selection: Option<&[f64]>) -> Result<EvalReport> {
    let heads = state.head_layers();
    let mut layers = Vec::with_capacity(heads.len());
    for (&layer, logits) in heads.iter().zip(stack) {
        layers.push(LayerScore {
            layer,
            top1: fusion::top1(logits, labels),
            ce: ops::softmax_cross_entropy(logits, labels)?.0,
        });
    }
    let own: Vec<f64> = layers.iter().map(|l| l.top1).collect();
    let sel = selection.unwrap_or(&own);
    let best = fusion::best_layer(sel)?;
    let (fused_top1, fused_ce) = match &state.fusion_alpha {
        Some(alpha) => {
            let fused = fusion::fuse(stack, &FusionHead { alpha: alpha.clone() })?;
            (Some(fusion::top1(&fused, labels)), Some(ops::softmax_cross_entropy(&fused, labels)?.0))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        samples: labels.len(),
        best_pred_layer: Some(heads[best]),
        best_pred_top1: Some(own[best]),
        layers,
        fused_top1,
        fused_ce,
    })
}

/// Deterministic eval-mode pass over `data`.
pub fn evaluate(state: &mut TrainState, data: &Dataset) -> Result<EvalReport> {
    let stack = logit_stack(state, data)?;
    score_stack(state, &stack, &data.labels, None)
}

/// Train-split results of the fusion stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub weights: Vec<f64>,
    pub n_eff: f64,
    pub train: EvalReport,
}

/// Caches eval-mode train logits, fits the fusion weights and stores them
/// in `state`.
pub fn fit_fusion(state: &mut TrainState, train: &Dataset) -> Result<FusionSummary> {
    let stack = logit_stack(state, train)?;
    let plan = state.config.fusion.clone();
    let head = fusion::train_fusion(&stack, &train.labels, plan.epochs, plan.lr)?;
    let weights = head.weights();
    state.fusion_alpha = Some(head.alpha);
    let report = score_stack(state, &stack, &train.labels, None)?;
    Ok(FusionSummary {
        n_eff: crate::diagnostics::n_eff(&weights)?,
        weights,
        train: report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub layer: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Overrides the configured epoch count.
    pub epochs: Option<usize>,
    /// Score the test split after every epoch rather than only at the end.
    pub eval_each_epoch: bool,
    pub measure_mem: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub epochs: usize,
    pub steps: usize,
    pub seconds: f64,
    pub param_count: usize,
    pub history: Vec<EpochRecord>,
    pub fusion: FusionSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_peak_bytes: Option<usize>,
}

/// Trains `state` for the remaining epochs, then runs the fusion stage.
/// `on_epoch` sees each epoch's records as they are produced.
pub fn fit(
    state: &mut TrainState,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&[EpochRecord]),
) -> Result<RunSummary> {
    let started = Instant::now();
    let plan = state.config.train.clone();
    let epochs = opts.epochs.unwrap_or(plan.epochs);
    let bs = plan.batch_size.max(1);
    if state.input_norm.is_none() {
        let c = state.config.arch.input[0];
        state.input_norm = Some(if state.config.data.normalize {
            Normalizer::fit(train)
        } else {
            Normalizer::identity(c)
        });
    }
    let norm = state.input_norm.clone().expect("set above");
    if state.total_steps == 0 {
        state.total_steps = epochs * train.len().div_ceil(bs);
    }
    let meter = opts.measure_mem.then(|| state.enable_meter());
    let shared = Arc::new(train.clone());
    let augment = Augment::from(&state.config.data);
    let heads = state.head_layers();
    let mut history = Vec::new();
    let mut batch_no = state.step;
    while state.epoch < epochs {
        let order = shuffled(train.len(), &mut state.data_rng);
        let aug_seed = state.data_rng.next_u64();
        let aug = (!augment.is_identity()).then(|| (augment.clone(), aug_seed));
        let loader = Loader::spawn(Arc::clone(&shared), order, bs, aug, norm.clone(), PREFETCH);
        let mut loss = vec![0.0; heads.len()];
        let mut correct = vec![0usize; heads.len()];
        let mut seen = 0usize;
        for batch in loader {
            let r = state.train_step(&batch.x, &batch.labels, batch_no)?;
            batch_no += 1;
            let n = batch.labels.len();
            seen += n;
            for (i, (&l, &c)) in r.losses.iter().zip(&r.correct).enumerate() {
                loss[i] += l * n as f64;
                correct[i] += c;
            }
        }
        let mut records: Vec<EpochRecord> = heads
            .iter()
            .enumerate()
            .map(|(i, &layer)| EpochRecord {
                epoch: state.epoch,
                layer,
                split: Split::Train,
                loss: loss[i] / seen.max(1) as f64,
                top1: 100.0 * correct[i] as f64 / seen.max(1) as f64,
            })
            .collect();
        let last = state.epoch + 1 == epochs;
        if let Some(t) = test.filter(|_| opts.eval_each_epoch || last) {
            let r = evaluate(state, t)?;
            records.extend(r.layers.iter().map(|s| EpochRecord {
                epoch: state.epoch,
                layer: s.layer,
                split: Split::Test,
                loss: s.ce,
                top1: s.top1,
            }));
        }
        on_epoch(&records);
        history.extend(records);
        state.epoch += 1;
    }
    let fusion = fit_fusion(state, train)?;
    let test_report = match test {
        Some(t) => {
            let stack = logit_stack(state, t)?;
            let selection = match state.config.fusion.best_pred_split {
                Split::Train => Some(fusion.train.top1()),
                Split::Test => None,
            };
            Some(score_stack(state, &stack, &t.labels, selection.as_deref())?)
        }
        None => None,
    };
    Ok(RunSummary {
        name: state.config.name.clone(),
        epochs,
        steps: state.step,
        seconds: started.elapsed().as_secs_f64(),
        param_count: state.param_count() + state.head_layers().len(),
        history,
        fusion,
        test: test_report,
        measured_peak_bytes: meter.map(|m| m.peak()),
    })
}

/// `epoch,layer,split,loss,top1` rows.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `layer,w_l,top1,fused_top1` rows.
pub fn write_fusion_csv(path: &Path, weights: &[f64], report: &EvalReport) -> Result<()> {
    let mut out = String::from("layer,w_l,top1,fused_top1\n");
    let fused = report.fused_top1.map(|v| v.to_string()).unwrap_or_default();
    for (s, w) in report.layers.iter().zip(weights) {
        out.push_str(&format!("{},{},{},{}\n", s.layer, w, s.top1, fused));
    }
    std::fs::write(path, out)?;
    Ok(())
}
