//! Architecture and training configuration.
//!
//! Configs are TOML documents with a versioned schema. Shipped presets live
//! in `presets/*.toml` and are embedded at build time so `--preset` works
//! from any directory.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, NormKind, DEFAULT_DROPOUT, FAL_HIDDEN};
use crate::error::{Error, Result};
use crate::goodness::{GoodnessConfig, DEFAULT_REDUCTION_RATIO};
use crate::tensor::Precision;

pub const SCHEMA_VERSION: u32 = 1;

pub const PRESETS: &[(&str, &str)] = &[
    ("vgg16-tiny-in", include_str!("../presets/vgg16-tiny-in.toml")),
    ("vgg16-in100", include_str!("../presets/vgg16-in100.toml")),
    ("vgg8-cifar100", include_str!("../presets/vgg8-cifar100.toml")),
    ("desk8", include_str!("../presets/desk8.toml")),
    ("desk16", include_str!("../presets/desk16.toml")),
];

fn yes() -> bool {
    true
}
fn default_ratio() -> usize {
    DEFAULT_REDUCTION_RATIO
}
fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}
fn default_fal_hidden() -> usize {
    FAL_HIDDEN
}
fn default_momentum() -> f64 {
    0.9
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_one() -> usize {
    1
}
fn default_warmup() -> usize {
    5
}
fn default_fusion_epochs() -> usize {
    500
}
fn default_fusion_lr() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoodnessDefaults {
    #[serde(default = "default_ratio")]
    pub reduction_ratio: usize,
    #[serde(default = "yes")]
    pub include_cc: bool,
    #[serde(default = "yes")]
    pub include_multiscale: bool,
}

impl Default for GoodnessDefaults {
    fn default() -> Self {
        GoodnessDefaults {
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            include_cc: true,
            include_multiscale: true,
        }
    }
}

/// One `[[arch.blocks]]` entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub out: usize,
    #[serde(default)]
    pub pool: bool,
    pub scales: [usize; 2],
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `[C, H, W]` of one input sample.
    pub input: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub stem_avg_pool: bool,
    /// Block indices that start a new FAL-separated group.
    #[serde(default)]
    pub group_boundaries: Vec<usize>,
    #[serde(default = "yes")]
    pub fal: bool,
    #[serde(default = "default_fal_hidden")]
    pub fal_hidden: usize,
    #[serde(default)]
    pub goodness: GoodnessDefaults,
    pub blocks: Vec<BlockEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    /// Forward every group, then run each group's backward and step.
    #[default]
    #[serde(alias = "greedy")]
    Standard,
    /// Forward, backward, step and release one group at a time.
    Interleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub optimizer: OptimizerKind,
    pub lr_start: f64,
    pub lr_end: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_one")]
    pub hgb_m: usize,
    #[serde(default = "default_warmup")]
    pub hgb_warmup_epochs: usize,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPlan {
    #[serde(default = "default_fusion_epochs")]
    pub epochs: usize,
    #[serde(default = "default_fusion_lr")]
    pub lr: f64,
    #[serde(default)]
    pub best_pred_split: Split,
}

impl Default for FusionPlan {
    fn default() -> Self {
        FusionPlan {
            epochs: default_fusion_epochs(),
            lr: default_fusion_lr(),
            best_pred_split: Split::Train,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPlan {
    /// Zero padding for random crops; 0 disables cropping.
    #[serde(default)]
    pub crop_pad: usize,
    #[serde(default)]
    pub hflip: bool,
    /// Brightness/contrast (and saturation on colour input) jitter strength.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub grayscale_p: f64,
    /// Standardise with per-channel statistics of the training split.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub name: String,
    pub arch: ArchSpec,
    pub train: TrainPlan,
    #[serde(default)]
    pub fusion: FusionPlan,
    #[serde(default)]
    pub data: DataPlan,
}

/// Line lookup used to anchor validation errors in the source text.
#[derive(Deserialize, Default)]
struct SpanProbe {
    #[serde(default)]
    arch: Option<ArchProbe>,
    #[serde(default)]
    train: Option<toml::Spanned<toml::Table>>,
}

#[derive(Deserialize, Default)]
struct ArchProbe {
    #[serde(default)]
    blocks: Vec<toml::Spanned<toml::Table>>,
    #[serde(default)]
    group_boundaries: Option<toml::Spanned<toml::Value>>,
    #[serde(default)]
    input: Option<toml::Spanned<toml::Value>>,
}

struct Anchors {
    blocks: Vec<usize>,
    boundaries: Option<usize>,
    input: Option<usize>,
    train: Option<usize>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl Anchors {
    fn new(src: &str) -> Self {
        let probe: SpanProbe = toml::from_str(src).unwrap_or_default();
        let arch = probe.arch.unwrap_or_default();
        Anchors {
            blocks: arch.blocks.iter().map(|b| line_of(src, b.span().start)).collect(),
            boundaries: arch.group_boundaries.map(|b| line_of(src, b.span().start)),
            input: arch.input.map(|b| line_of(src, b.span().start)),
            train: probe.train.map(|t| line_of(src, t.span().start)),
        }
    }

    fn none() -> Self {
        Anchors {
            blocks: Vec::new(),
            boundaries: None,
            input: None,
            train: None,
        }
    }
}

fn at(line: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

impl ArchSpec {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Spatial size after the optional stem.
    pub fn first_spatial(&self) -> (usize, usize) {
        let (h, w) = (self.input[1], self.input[2]);
        if self.stem_avg_pool {
            (h / 2, w / 2)
        } else {
            (h, w)
        }
    }

    /// `(H, W)` seen by each block's convolution (and its goodness head).
    pub fn block_spatial(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = self.first_spatial();
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            out.push((h, w));
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        out
    }

    /// Input spatial size followed by each block's output spatial size.
    pub fn spatial_trajectory(&self) -> Vec<usize> {
        let mut t = vec![self.first_spatial().0];
        for (b, (h, _)) in self.blocks.iter().zip(self.block_spatial()) {
            t.push(if b.pool { h / 2 } else { h });
        }
        t
    }

    pub fn goodness_config(&self, l: usize) -> GoodnessConfig {
        let b = &self.blocks[l];
        GoodnessConfig {
            scales: (b.scales[0], b.scales[1]),
            reduction_ratio: self.goodness.reduction_ratio,
            include_cc: self.goodness.include_cc,
            include_multiscale: self.goodness.include_multiscale,
        }
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let mut cin = self.input[0];
        self.blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let spec = BlockSpec {
                    in_channels: cin,
                    out_channels: b.out,
                    has_pool: b.pool,
                    dropout_p: b.dropout,
                    norm: b.norm,
                    goodness: self.goodness_config(l),
                };
                cin = b.out;
                spec
            })
            .collect()
    }

    /// Layer ranges trained jointly at block size `m`.
    pub fn groups(&self, m: usize) -> Vec<Range<usize>> {
        let l = self.blocks.len();
        (0..l).step_by(m.max(1)).map(|s| s..(s + m).min(l)).collect()
    }

    /// Blocks whose input passes through a FAL at block size `m`.
    pub fn fal_boundaries(&self, m: usize) -> Vec<usize> {
        if !self.fal {
            return Vec::new();
        }
        if m <= 1 {
            self.group_boundaries.clone()
        } else {
            self.groups(m).iter().skip(1).map(|g| g.start).collect()
        }
    }

    fn validate(&self, anchors: &Anchors) -> Result<()> {
        let line = |l: usize| anchors.blocks.get(l).copied();
        if self.input.contains(&0) {
            return Err(at(anchors.input, "input dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(at(None, "num_classes must be at least 2"));
        }
        if self.blocks.is_empty() {
            return Err(at(None, "architecture has no blocks"));
        }
        if self.stem_avg_pool && (!self.input[1].is_multiple_of(2) || !self.input[2].is_multiple_of(2)) {
            return Err(at(anchors.input, "stem average pool needs even input height and width"));
        }
        for (l, (b, (h, w))) in self.blocks.iter().zip(self.block_spatial()).enumerate() {
            if b.out == 0 {
                return Err(at(line(l), format!("block {l}: out channels must be positive")));
            }
            if !(0.0..1.0).contains(&b.dropout) {
                return Err(at(line(l), format!("block {l}: dropout must lie in [0, 1)")));
            }
            if h == 0 || w == 0 {
                return Err(at(line(l), format!("block {l}: spatial size collapsed to zero")));
            }
            if b.pool && (h % 2 != 0 || w % 2 != 0) {
                return Err(at(line(l), format!("block {l}: cannot pool odd spatial size {h}x{w}")));
            }
            self.goodness_config(l)
                .validate(b.out, h, w)
                .map_err(|e| at(line(l), format!("block {l}: {e}")))?;
        }
        let mut prev = 0;
        for &g in &self.group_boundaries {
            if g <= prev || g >= self.blocks.len() {
                return Err(at(
                    anchors.boundaries,
                    format!(
                        "group boundaries must be strictly increasing within 1..{}, got {:?}",
                        self.blocks.len(),
                        self.group_boundaries
                    ),
                ));
            }
            prev = g;
        }
        if self.fal && self.fal_hidden == 0 {
            return Err(at(None, "fal_hidden must be positive"));
        }
        Ok(())
    }
}

/// Goodness dimension of every layer.
pub fn goodness_dims(arch: &ArchSpec) -> Vec<usize> {
    arch.blocks
        .iter()
        .enumerate()
        .map(|(l, b)| arch.goodness_config(l).dim(b.out))
        .collect()
}

impl TrainPlan {
    fn validate(&self, layers: usize, line: Option<usize>) -> Result<()> {
        if self.hgb_m == 0 || self.hgb_m > layers || !layers.is_multiple_of(self.hgb_m) {
            return Err(at(line, format!("hgb_m = {} must divide the {layers} blocks", self.hgb_m)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(at(line, "batch_size and epochs must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0 && self.lr_end.is_finite() && self.lr_start.is_finite()) {
            return Err(at(line, "learning rates must be finite with lr_start > 0"));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(at(line, "grad_clip must be positive"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(at(line, "weight_decay must be >= 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    /// Whether the linear warmup applies (grouped training only).
    pub fn uses_warmup(&self) -> bool {
        self.hgb_m > 1 && self.hgb_warmup_epochs > 0
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.validate_with(&Anchors::none())
    }

    fn validate_with(&self, anchors: &Anchors) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(at(
                Some(1),
                format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.arch.validate(anchors)?;
        self.train.validate(self.arch.num_blocks(), anchors.train)?;
        if self.fusion.epochs == 0 || self.fusion.lr <= 0.0 {
            return Err(at(None, "fusion epochs and lr must be positive"));
        }
        Ok(())
    }

    /// Parses and validates TOML text.
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of(src, s.start));
            at(line, e.message().to_string())
        })?;
        cfg.validate_with(&Anchors::new(src))?;
        Ok(cfg)
    }

    /// Like [`Config::from_toml`] with `key=value` overrides applied first.
    pub fn from_toml_with(src: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml(src);
        }
        let mut table: toml::Table = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of(src, s.start));
            at(line, e.message().to_string())
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml(preset_source(name)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

pub fn preset_source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::config(format!("unknown preset `{name}` (available: {})", names.join(", ")))
        })
}

/// Loads a config file, applying `--set` style overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Config::from_toml_with(&src, overrides)
}

/// Sets `a.b.c=value` (array elements by index, e.g. `arch.blocks.3.out=16`).
/// The value is parsed as a TOML literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| Error::config("empty override key"))?;
    let mut cur: &mut toml::Value = table
        .entry(path.first().copied().unwrap_or(last).to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if path.is_empty() {
        *cur = value;
        return Ok(());
    }
    for p in &path[1..] {
        cur = step(cur, p, spec)?;
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last
                .parse()
                .map_err(|_| Error::config(format!("override `{spec}`: `{last}` is not an index")))?;
            let slot = a
                .get_mut(i)
                .ok_or_else(|| Error::config(format!("override `{spec}`: index {i} out of range")))?;
            *slot = value;
        }
        _ => return Err(Error::config(format!("override `{spec}`: `{key}` is not a table"))),
    }
    Ok(())
}

fn step<'a>(cur: &'a mut toml::Value, p: &str, spec: &str) -> Result<&'a mut toml::Value> {
    match cur {
        toml::Value::Table(t) => Ok(t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))),
        toml::Value::Array(a) => {
            let i: usize = p
                .parse()
                .map_err(|_| Error::config(format!("override `{spec}`: `{p}` is not an index")))?;
            a.get_mut(i)
                .ok_or_else(|| Error::config(format!("override `{spec}`: index {i} out of range")))
        }
        _ => Err(Error::config(format!("override `{spec}`: `{p}` is not a table"))),
    }
}
