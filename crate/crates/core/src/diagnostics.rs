//! Per-layer accuracy curve metrics: Decline Area, Tail Retention,
//! Shallow/Deep Gain and the participation ratio of fusion weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer top-1 accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub name: String,
    pub acc: Vec<f64>,
    /// Fusion weights, when the source recorded them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl LayerCurve {
    pub fn new(name: impl Into<String>, acc: Vec<f64>) -> Result<Self> {
        if acc.is_empty() {
            return Err(Error::invalid("layer curve", "empty curve"));
        }
        if let Some(a) = acc.iter().find(|a| !(0.0..=100.0).contains(*a)) {
            return Err(Error::invalid("layer curve", format!("accuracy {a} outside [0, 100]")));
        }
        Ok(LayerCurve {
            name: name.into(),
            acc,
            weights: None,
        })
    }
}

/// First index of the maximum.
pub fn peak_layer(acc: &[f64]) -> usize {
    let mut best = 0;
    for (l, &a) in acc.iter().enumerate() {
        if a > acc[best] {
            best = l;
        }
    }
    best
}

/// `Σ_{l > l*} max(0, acc[l*] − acc[l])`.
pub fn decline_area(acc: &[f64]) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::invalid("decline_area", "empty curve"));
    }
    let p = peak_layer(acc);
    Ok(acc[p + 1..].iter().map(|&a| (acc[p] - a).max(0.0)).sum())
}

/// Mean of the final four layers over the peak accuracy.
pub fn tail_retention(acc: &[f64]) -> Result<f64> {
    if acc.len() < 4 {
        return Err(Error::invalid("tail_retention", format!("needs at least 4 layers, got {}", acc.len())));
    }
    let peak = acc[peak_layer(acc)];
    if peak <= 0.0 {
        return Err(Error::invalid("tail_retention", "peak accuracy is zero"));
    }
    let tail = &acc[acc.len() - 4..];
    Ok(tail.iter().sum::<f64>() / 4.0 / peak)
}

/// Mean per-layer improvement of `b` over `a` on the first `⌈L/2⌉` layers
/// and on the rest.
pub fn shallow_deep_gain(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::shape("shallow_deep_gain", "curve length", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::invalid("shallow_deep_gain", "needs at least 2 layers"));
    }
    let split = a.len().div_ceil(2);
    let mean = |r: std::ops::Range<usize>| {
        let n = r.len() as f64;
        r.map(|l| b[l] - a[l]).sum::<f64>() / n
    };
    Ok((mean(0..split), mean(split..a.len())))
}

/// Participation ratio `(Σw)² / Σw²`, evaluated on `w / max(w)` so equal
/// weights give exactly `L`.
pub fn n_eff(w: &[f64]) -> Result<f64> {
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("n_eff", "weights must be finite and nonnegative"));
    }
    let top = w.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Err(Error::invalid("n_eff", "all weights are zero"));
    }
    let s: f64 = w.iter().map(|v| v / top).sum();
    let s2: f64 = w.iter().map(|v| (v / top) * (v / top)).sum();
    Ok(s * s / s2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub name: String,
    pub peak_layer: usize,
    pub peak_acc: f64,
    pub da: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_eff: Option<f64>,
}

/// Changes from the first curve to the second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub from: String,
    pub to: String,
    pub sg: f64,
    pub dg: f64,
    pub delta_da: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_tr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_n_eff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub curves: Vec<CurveMetrics>,
    pub pairs: Vec<PairDelta>,
}

pub fn curve_metrics(c: &LayerCurve) -> Result<CurveMetrics> {
    let p = peak_layer(&c.acc);
    Ok(CurveMetrics {
        name: c.name.clone(),
        peak_layer: p,
        peak_acc: c.acc[p],
        da: decline_area(&c.acc)?,
        tr: tail_retention(&c.acc).ok(),
        n_eff: c.weights.as_deref().map(n_eff).transpose()?,
    })
}

/// Metrics for every curve plus consecutive-pair deltas.
pub fn report(curves: &[LayerCurve]) -> Result<DiagnosticsReport> {
    let metrics = curves.iter().map(curve_metrics).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (i, pair) in curves.windows(2).enumerate() {
        let (sg, dg) = shallow_deep_gain(&pair[0].acc, &pair[1].acc)?;
        let (ma, mb) = (&metrics[i], &metrics[i + 1]);
        pairs.push(PairDelta {
            from: pair[0].name.clone(),
            to: pair[1].name.clone(),
            sg,
            dg,
            delta_da: mb.da - ma.da,
            delta_tr: ma.tr.zip(mb.tr).map(|(a, b)| b - a),
            delta_n_eff: ma.n_eff.zip(mb.n_eff).map(|(a, b)| b - a),
        });
    }
    Ok(DiagnosticsReport { curves: metrics, pairs })
}

/// Reads a curve from CSV with a `layer` column and a `top1` (or `acc`)
/// column. Training logs with an `epoch` column contribute their last
/// epoch; a `w_l` column supplies fusion weights.
pub fn read_curve_csv(path: &Path) -> Result<LayerCurve> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h.trim()));
    let layer_col = col(&["layer"]).ok_or_else(|| fmt("missing `layer` column".into()))?;
    let acc_col = col(&["top1", "acc"]).ok_or_else(|| fmt("missing `top1` column".into()))?;
    let epoch_col = col(&["epoch"]);
    let w_col = col(&["w_l", "weight"]);
    let split_col = col(&["split"]);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        if split_col.is_some_and(|c| rec.get(c).map(str::trim) == Some("train")) {
            continue;
        }
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|e| fmt(format!("line {}: {e}", rec.position().map_or(0, |p| p.line()))))
        };
        let layer = rec
            .get(layer_col)
            .unwrap_or("")
            .trim()
            .parse::<usize>()
            .map_err(|e| fmt(format!("bad layer index: {e}")))?;
        let epoch = epoch_col.map(num).transpose()?.unwrap_or(0.0);
        let w = w_col.map(num).transpose()?;
        rows.push((epoch, layer, num(acc_col)?, w));
    }
    let last = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    rows.retain(|r| r.0 == last);
    rows.sort_by_key(|r| r.1);
    if rows.is_empty() {
        return Err(fmt("no rows".into()));
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut curve = LayerCurve::new(name, rows.iter().map(|r| r.2).collect()).map_err(|e| fmt(e.to_string()))?;
    if rows.iter().all(|r| r.3.is_some()) {
        curve.weights = Some(rows.iter().map(|r| r.3.unwrap_or(0.0)).collect());
    }
    Ok(curve)
}
