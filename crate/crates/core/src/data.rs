//! Datasets: IDX and raw-tensor I/O, a synthetic layout corpus,
//! augmentation, normalisation and a prefetching batch loader.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataPlan, Split};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Images `(N, C, H, W)` with values in `[0, 1]` and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, num_classes: usize, split: Option<Split>) -> Result<Self> {
        if images.shape().b != labels.len() {
            return Err(Error::shape("dataset", "label count", images.shape().b, labels.len()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::invalid(
                "dataset",
                format!("label {y} at index {i} is outside [0, {num_classes})"),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s.c, s.h, s.w]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Checks that no image of `self` also appears in `other`.
    pub fn check_disjoint(&self, other: &Dataset) -> Result<()> {
        use std::collections::HashSet;
        let key = |d: &Dataset, i: usize| d.images.sample(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let seen: HashSet<Vec<u64>> = (0..self.len()).map(|i| key(self, i)).collect();
        match (0..other.len()).find(|&i| seen.contains(&key(other, i))) {
            Some(i) => Err(Error::invalid("dataset", format!("sample {i} of the second split also appears in the first"))),
            None => Ok(()),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }
}

/// Per-channel affine standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel mean and standard deviation over a whole dataset.
    pub fn fit(data: &Dataset) -> Self {
        let s = data.images.shape();
        let n = (s.b * s.spatial()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut sq = vec![0.0; s.c];
        for b in 0..s.b {
            for (c, plane) in data.images.sample(b).chunks(s.spatial()).enumerate() {
                mean[c] += plane.iter().sum::<f64>();
                sq[c] += plane.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, q)| {
                *m /= n;
                (q / n - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Normalizer { mean, std }
    }

    fn apply(&self, x: &mut Tensor4, f: impl Fn(f64, f64, f64) -> f64) {
        let s = x.shape();
        for b in 0..s.b {
            for (c, plane) in x.sample_mut(b).chunks_mut(s.spatial()).enumerate() {
                plane.iter_mut().for_each(|v| *v = f(*v, self.mean[c], self.std[c]));
            }
        }
    }

    pub fn normalize(&self, x: &mut Tensor4) {
        self.apply(x, |v, m, s| (v - m) / s);
    }

    pub fn denormalize(&self, x: &mut Tensor4) {
        self.apply(x, |v, m, s| v * s + m);
    }
}

/// Train-time augmentation on `[0, 1]` images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Augment {
    pub crop_pad: usize,
    pub hflip: bool,
    pub jitter: f64,
    pub grayscale_p: f64,
}

impl From<&DataPlan> for Augment {
    fn from(p: &DataPlan) -> Self {
        Augment {
            crop_pad: p.crop_pad,
            hflip: p.hflip,
            jitter: p.jitter,
            grayscale_p: p.grayscale_p,
        }
    }
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        self.crop_pad == 0 && !self.hflip && self.jitter == 0.0 && self.grayscale_p == 0.0
    }

    /// Random crop with zero padding, horizontal flip, colour jitter and
    /// random grayscale, applied independently per sample. On single-channel
    /// input the jitter reduces to brightness and contrast.
    pub fn apply(&self, x: &mut Tensor4, rng: &mut impl Rng) {
        let s = x.shape();
        let (hw, plane) = (s.w, s.spatial());
        let mut buf = vec![0.0; s.per_sample()];
        for b in 0..s.b {
            let img = x.sample_mut(b);
            if self.crop_pad > 0 {
                let p = self.crop_pad as i64;
                let dy = rng.random_range(-p..=p) as isize;
                let dx = rng.random_range(-p..=p) as isize;
                for c in 0..s.c {
                    for i in 0..s.h {
                        for j in 0..s.w {
                            let (si, sj) = (i as isize + dy, j as isize + dx);
                            buf[c * plane + i * hw + j] = if si < 0 || sj < 0 || si >= s.h as isize || sj >= s.w as isize {
                                0.0
                            } else {
                                img[c * plane + si as usize * hw + sj as usize]
                            };
                        }
                    }
                }
                img.copy_from_slice(&buf);
            }
            if self.hflip && rng.random_bool(0.5) {
                for row in img.chunks_mut(hw) {
                    row.reverse();
                }
            }
            if self.jitter > 0.0 {
                let j = self.jitter;
                let brightness = rng.random_range(1.0 - j..=1.0 + j).max(0.0);
                let contrast = rng.random_range(1.0 - j..=1.0 + j).max(0.0);
                let saturation = rng.random_range(1.0 - j..=1.0 + j).max(0.0);
                img.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
                let mean = gray(img, s.c, plane).iter().sum::<f64>() / plane as f64;
                img.iter_mut().for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
                if s.c == 3 {
                    let g = gray(img, s.c, plane);
                    for c in 0..3 {
                        for k in 0..plane {
                            let v = &mut img[c * plane + k];
                            *v = ((*v - g[k]) * saturation + g[k]).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            if s.c == 3 && self.grayscale_p > 0.0 && rng.random_bool(self.grayscale_p.min(1.0)) {
                let g = gray(img, s.c, plane);
                for c in 0..3 {
                    img[c * plane..(c + 1) * plane].copy_from_slice(&g);
                }
            }
        }
    }
}

fn gray(img: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    if channels != 3 {
        return img[..plane].to_vec();
    }
    (0..plane)
        .map(|k| 0.299 * img[k] + 0.587 * img[plane + k] + 0.114 * img[2 * plane + k])
        .collect()
}

// ---------------------------------------------------------------- IDX

/// Element types of the IDX format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I32,
    F32,
    F64,
}

impl IdxType {
    fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0x08 => IdxType::U8,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            IdxType::U8 => 1,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// Raw IDX contents: dims and values widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub kind: IdxType,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, "bad IDX magic"));
    }
    let kind = IdxType::from_code(bytes[2]).ok_or_else(|| format_err(path, format!("unknown IDX type 0x{:02x}", bytes[2])))?;
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != count * kind.size() {
        return Err(format_err(
            path,
            format!("expected {} payload bytes for dims {dims:?}, found {}", count * kind.size(), body.len()),
        ));
    }
    let values = match kind {
        IdxType::U8 => body.iter().map(|&b| b as f64).collect(),
        IdxType::I32 => body.chunks(4).map(|c| i32::from_be_bytes(c.try_into().expect("4")) as f64).collect(),
        IdxType::F32 => body.chunks(4).map(|c| f32::from_be_bytes(c.try_into().expect("4")) as f64).collect(),
        IdxType::F64 => body.chunks(8).map(|c| f64::from_be_bytes(c.try_into().expect("8"))).collect(),
    };
    Ok(IdxArray { kind, dims, values })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path)?;
    parse_idx(&bytes, path)
}

pub fn encode_idx(a: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, a.kind.code(), a.dims.len() as u8];
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in &a.values {
        match a.kind {
            IdxType::U8 => out.push(v as u8),
            IdxType::I32 => out.extend_from_slice(&(v as i32).to_be_bytes()),
            IdxType::F32 => out.extend_from_slice(&(v as f32).to_be_bytes()),
            IdxType::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    out
}

pub fn write_idx(path: &Path, a: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(a))?;
    Ok(())
}

/// Companion label file of an IDX image file.
pub fn idx_labels_path(images: &Path) -> PathBuf {
    let name = images.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let name = if name.contains("images-idx3") {
        name.replace("images-idx3", "labels-idx1")
    } else {
        name.replace("images", "labels")
    };
    images.with_file_name(name)
}

/// Loads an IDX image file (`N×H×W` or `N×C×H×W`) and its label file.
/// Byte images are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let img = read_idx(images)?;
    let shape = match img.dims[..] {
        [n, h, w] => Shape4::new(n, 1, h, w),
        [n, c, h, w] => Shape4::new(n, c, h, w),
        _ => return Err(format_err(images, format!("expected 3 or 4 image dims, found {:?}", img.dims))),
    };
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 || lab.kind == IdxType::F32 || lab.kind == IdxType::F64 {
        return Err(format_err(labels, "labels must be a 1-D integer IDX array"));
    }
    let scale = if img.kind == IdxType::U8 { 255.0 } else { 1.0 };
    let values = img.values.into_iter().map(|v| v / scale).collect();
    let tensor = Tensor4::from_vec(shape, values).map_err(|e| format_err(images, e.to_string()))?;
    let labels_v = lab
        .values
        .iter()
        .map(|&v| if v < 0.0 { usize::MAX } else { v as usize })
        .collect();
    Dataset::new(tensor, labels_v, num_classes, None)
}

/// Writes byte-quantised images and labels. Fails if a pixel is not a
/// multiple of 1/255.
pub fn save_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let s = data.images.shape();
    let mut bytes = Vec::with_capacity(s.numel());
    for &v in data.images.data() {
        let q = (v * 255.0).round();
        if !(0.0..=255.0).contains(&q) || q / 255.0 != v {
            return Err(format_err(images, format!("pixel {v} is not representable as a byte")));
        }
        bytes.push(q);
    }
    let dims = if s.c == 1 { vec![s.b, s.h, s.w] } else { vec![s.b, s.c, s.h, s.w] };
    write_idx(
        images,
        &IdxArray {
            kind: IdxType::U8,
            dims,
            values: bytes,
        },
    )?;
    let kind = if data.num_classes <= 256 { IdxType::U8 } else { IdxType::I32 };
    write_idx(
        labels,
        &IdxArray {
            kind,
            dims: vec![data.len()],
            values: data.labels.iter().map(|&y| y as f64).collect(),
        },
    )
}

// ------------------------------------------------------- raw + manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    U8,
    F32,
    F64,
}

impl RawDtype {
    fn size(self) -> usize {
        match self {
            RawDtype::U8 => 1,
            RawDtype::F32 => 4,
            RawDtype::F64 => 8,
        }
    }
}

/// Sidecar describing a little-endian image blob and a `u32` label blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub shape: [usize; 4],
    pub dtype: RawDtype,
    pub images: String,
    pub labels: String,
    pub num_classes: usize,
    #[serde(default)]
    pub split: Option<Split>,
}

pub fn load_raw(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(manifest_path, e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let img_path = dir.join(&m.images);
    let bytes = fs::read(&img_path)?;
    let [n, c, h, w] = m.shape;
    let count = n * c * h * w;
    if bytes.len() != count * m.dtype.size() {
        return Err(format_err(
            &img_path,
            format!("expected {} bytes for shape {:?}, found {}", count * m.dtype.size(), m.shape, bytes.len()),
        ));
    }
    let values: Vec<f64> = match m.dtype {
        RawDtype::U8 => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        RawDtype::F32 => bytes.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
        RawDtype::F64 => bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
    };
    let images = Tensor4::from_vec(Shape4::new(n, c, h, w), values).map_err(|e| format_err(&img_path, e.to_string()))?;
    let lab_path = dir.join(&m.labels);
    let lab = fs::read(&lab_path)?;
    if lab.len() != 4 * n {
        return Err(format_err(&lab_path, format!("expected {} label bytes, found {}", 4 * n, lab.len())));
    }
    let labels = lab.chunks(4).map(|c| u32::from_le_bytes(c.try_into().expect("4")) as usize).collect();
    Dataset::new(images, labels, m.num_classes, m.split)
}

/// Writes `<stem>.json`, `<stem>-images.bin` (f64) and `<stem>-labels.bin`.
pub fn save_raw(data: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let images = format!("{stem}-images.bin");
    let labels = format!("{stem}-labels.bin");
    let mut w = BufWriter::new(fs::File::create(dir.join(&images))?);
    for v in data.images.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let lab: Vec<u8> = data.labels.iter().flat_map(|&y| (y as u32).to_le_bytes()).collect();
    fs::write(dir.join(&labels), lab)?;
    let m = Manifest {
        shape: data.images.shape().as_array(),
        dtype: RawDtype::F64,
        images,
        labels,
        num_classes: data.num_classes,
        split: data.split,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&m).expect("manifest serialises"))?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    Raw,
}

/// Loads a dataset from an IDX image file (labels alongside) or a manifest.
pub fn load_dataset(path: &Path, format: DataFormat, num_classes: usize) -> Result<Dataset> {
    match format {
        DataFormat::Idx => load_idx(path, &idx_labels_path(path), num_classes),
        DataFormat::Raw => load_raw(path),
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Finds one split inside a data directory: `<split>.json`, then
/// `<split>-images.idx`, then the `train`/`t10k` `-images-idx3-ubyte` names.
pub fn load_split(dir: &Path, split: Split, num_classes: usize) -> Result<Dataset> {
    let name = split_name(split);
    let manifest = dir.join(format!("{name}.json"));
    let mut data = if manifest.exists() {
        load_raw(&manifest)?
    } else {
        let idx = dir.join(format!("{name}-images.idx"));
        let legacy = dir.join(format!("{}-images-idx3-ubyte", if split == Split::Test { "t10k" } else { "train" }));
        let path = [idx, legacy]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| format_err(dir, format!("no {name} split found")))?;
        load_idx(&path, &idx_labels_path(&path), num_classes)?
    };
    if data.num_classes != num_classes {
        return Err(format_err(
            dir,
            format!("dataset has {} classes but the network expects {num_classes}", data.num_classes),
        ));
    }
    data.split = Some(split);
    Ok(data)
}

/// Writes a split in the layout `load_split` reads.
pub fn save_split(data: &Dataset, dir: &Path, split: Split, format: DataFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    let name = split_name(split);
    match format {
        DataFormat::Raw => save_raw(data, dir, name).map(|_| ()),
        DataFormat::Idx => save_idx(
            data,
            &dir.join(format!("{name}-images.idx")),
            &dir.join(format!("{name}-labels.idx")),
        ),
    }
}

// ------------------------------------------------------------ synthetic

/// Layout corpus: every class places a fixed set of patch prototypes on a
/// 2×2 grid of cells. Classes come in pairs that share the same patches
/// in different cells, so telling a pair apart needs spatial energy
/// layout rather than global channel statistics alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Maximum patch displacement in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            channels: 1,
            size: 28,
            train: 5000,
            test: 1000,
            noise: 0.5,
            jitter: 3,
            seed: 0,
        }
    }
}

struct Prototypes {
    patch: usize,
    patches: Vec<Vec<f64>>,
    layouts: Vec<[usize; 4]>,
}

fn smooth_patch(rng: &mut impl Rng, channels: usize, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..channels * k * k).map(|_| gaussian(rng)).collect();
    let mut out = vec![0.0; raw.len()];
    for c in 0..channels {
        for i in 0..k {
            for j in 0..k {
                let mut s = 0.0;
                let mut n = 0.0;
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let (a, b) = (i as isize + di, j as isize + dj);
                        if a >= 0 && b >= 0 && (a as usize) < k && (b as usize) < k {
                            s += raw[c * k * k + a as usize * k + b as usize];
                            n += 1.0;
                        }
                    }
                }
                out[c * k * k + i * k + j] = 1.0 / (1.0 + (-4.0 * s / n).exp());
            }
        }
    }
    out
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl SyntheticSpec {
    fn prototypes(&self) -> Prototypes {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let patch = (self.size / 2).saturating_sub(2 * self.jitter).max(3);
        let kinds = self.classes.div_ceil(2) + 3;
        let patches = (0..kinds).map(|_| smooth_patch(&mut rng, self.channels, patch)).collect();
        let mut layouts = Vec::with_capacity(self.classes);
        for pair in 0..self.classes.div_ceil(2) {
            let mut cells = [0usize; 4];
            for c in cells.iter_mut() {
                *c = rng.random_range(0..kinds);
            }
            while cells.iter().all(|&c| c == cells[0]) {
                cells[3] = rng.random_range(0..kinds);
            }
            layouts.push(cells);
            if layouts.len() < self.classes {
                // Same patches, rotated one cell clockwise.
                let mut rot = [cells[2], cells[0], cells[3], cells[1]];
                if rot == cells {
                    rot.swap(0, 3);
                }
                layouts.push(rot);
            }
            let _ = pair;
        }
        Prototypes { patch, patches, layouts }
    }

    fn render(&self, p: &Prototypes, class: usize, rng: &mut impl Rng, out: &mut [f64]) {
        let (n, k) = (self.size, p.patch);
        let plane = n * n;
        out.iter_mut().for_each(|v| *v = 0.0);
        let cell = n / 2;
        let j = self.jitter as i64;
        for (slot, &kind) in p.layouts[class].iter().enumerate() {
            let amp = rng.random_range(0.7..1.0);
            let oy = (slot / 2 * cell + (cell - k) / 2) as isize + rng.random_range(-j..=j) as isize;
            let ox = (slot % 2 * cell + (cell - k) / 2) as isize + rng.random_range(-j..=j) as isize;
            for c in 0..self.channels {
                for i in 0..k {
                    for jj in 0..k {
                        let (y, x) = (oy + i as isize, ox + jj as isize);
                        if y >= 0 && x >= 0 && (y as usize) < n && (x as usize) < n {
                            let v = &mut out[c * plane + y as usize * n + x as usize];
                            *v = v.max(amp * p.patches[kind][c * k * k + i * k + jj]);
                        }
                    }
                }
            }
        }
        for v in out.iter_mut() {
            let noisy = (*v + self.noise * gaussian(rng)).clamp(0.0, 1.0);
            *v = (noisy * 255.0).round() / 255.0;
        }
    }

    fn split(&self, p: &Prototypes, count: usize, stream: u64, split: Split) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let shape = Shape4::new(count, self.channels, self.size, self.size);
        let mut images = Tensor4::zeros(shape);
        let mut labels: Vec<usize> = (0..count).map(|i| i % self.classes).collect();
        for i in (1..count).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        for (b, &y) in labels.iter().enumerate() {
            self.render(p, y, &mut rng, images.sample_mut(b));
        }
        Dataset {
            images,
            labels,
            num_classes: self.classes,
            split: Some(split),
        }
    }

    /// Class-balanced train and test splits.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes < 2 || self.size < 8 || self.channels == 0 {
            return Err(Error::invalid("synthetic", "need at least 2 classes, 8×8 images and one channel"));
        }
        let p = self.prototypes();
        Ok((self.split(&p, self.train, 1, Split::Train), self.split(&p, self.test, 2, Split::Test)))
    }
}

// --------------------------------------------------------------- loader

#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    pub x: Tensor4,
    pub labels: Vec<usize>,
}

/// Batches of a fixed sample order assembled on a worker thread into a
/// bounded queue. A single worker keeps the order and the augmentation
/// stream deterministic.
pub struct Loader {
    rx: Option<Receiver<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Loader {
    pub fn spawn(
        data: Arc<Dataset>,
        order: Vec<usize>,
        batch_size: usize,
        augment: Option<(Augment, u64)>,
        norm: Normalizer,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            let mut aug = augment.map(|(a, seed)| (a, ChaCha8Rng::seed_from_u64(seed)));
            for (index, chunk) in order.chunks(batch_size.max(1)).enumerate() {
                let mut x = data.images.gather_batch(chunk);
                if let Some((a, rng)) = aug.as_mut() {
                    a.apply(&mut x, rng);
                }
                norm.normalize(&mut x);
                let labels = chunk.iter().map(|&i| data.labels[i]).collect();
                if tx.send(Batch { index, x, labels }).is_err() {
                    return;
                }
            }
        });
        Loader {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for Loader {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Fisher-Yates permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}
