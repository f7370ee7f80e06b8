//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BCVGCKPT" | version u32 | sha256(arch) [32] | config TOML (u32 len + utf8)
//! epoch, step, total_steps, cycles: u64
//! data rng, dropout rng: seed [32] | stream u64 | word position u128
//! input normaliser: u8 flag [| u32 C | C×f64 mean | C×f64 std]
//! u32 groups, each: u32 params, each: name | tensor
//!                   optimizer: u64 steps | u32 n | n×tensor | u32 n | n×tensor
//! u32 layers, each: u8 flag [| u32 C | C×f64 mean | C×f64 var]
//! fusion: u8 flag [| u32 L | L×f64 alpha]
//! sha256 of everything above [32]
//! ```
//!
//! A tensor is `u8 width (4 or 8) | 4×u32 shape | data`. Width 4 is used
//! only when every value is exactly an `f32`, so loading is always
//! bit-exact.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{ArchSpec, Config};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use crate::training::TrainState;

const MAGIC: &[u8; 8] = b"BCVGCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// SHA-256 of the canonical TOML form of an architecture.
pub fn arch_hash(arch: &ArchSpec) -> [u8; 32] {
    let text = toml::to_string(arch).expect("architecture serialises");
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn tensor(&mut self, t: &Tensor4) {
        let narrow = t.data().iter().all(|&v| (v as f32) as f64 == v || v.is_nan());
        self.u8(if narrow { 4 } else { 8 });
        t.shape().as_array().iter().for_each(|&d| self.u32(d));
        if narrow {
            t.data().iter().for_each(|&v| self.0.extend_from_slice(&(v as f32).to_le_bytes()));
        } else {
            self.f64s(t.data());
        }
    }
    fn rng(&mut self, r: &ChaCha8Rng) {
        self.0.extend_from_slice(&r.get_seed());
        self.u64(r.get_stream());
        self.0.extend_from_slice(&r.get_word_pos().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
    }
    fn tensor(&mut self) -> Result<Tensor4> {
        let width = self.u8()?;
        let d: Vec<usize> = (0..4).map(|_| self.u32()).collect::<Result<_>>()?;
        let shape = Shape4::new(d[0], d[1], d[2], d[3]);
        let n = shape.numel();
        let data = match width {
            4 => self.take(4 * n)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            8 => self.f64s(n)?,
            w => return Err(bad(format!("unknown value width {w}"))),
        };
        let mut t = Tensor4::zeros(shape);
        t.data_mut().copy_from_slice(&data);
        Ok(t)
    }
    fn rng(&mut self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self.take(32)?.try_into().expect("32");
        let stream = self.u64()?;
        let pos = u128::from_le_bytes(self.take(16)?.try_into().expect("16"));
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.0.extend_from_slice(&arch_hash(&state.config.arch));
    w.bytes(state.config.to_toml()?.as_bytes());
    for v in [state.epoch, state.step, state.total_steps, state.cycles] {
        w.u64(v as u64);
    }
    w.rng(&state.data_rng);
    w.rng(&state.dropout_rng);
    match &state.input_norm {
        Some(n) => {
            w.u8(1);
            w.u32(n.mean.len());
            w.f64s(&n.mean);
            w.f64s(&n.std);
        }
        None => w.u8(0),
    }
    w.u32(state.groups.len());
    for g in &state.groups {
        w.u32(g.params.len());
        for (_, p) in g.params.iter() {
            w.bytes(p.name.as_bytes());
            w.tensor(&p.value);
        }
        w.u64(g.opt.steps);
        for side in [&g.opt.first, &g.opt.second] {
            w.u32(side.len());
            side.iter().for_each(|t| w.tensor(t));
        }
    }
    w.u32(state.layers.len());
    for l in &state.layers {
        match &l.block.bn {
            Some(bn) => {
                w.u8(1);
                w.u32(bn.mean.len());
                w.f64s(&bn.mean);
                w.f64s(&bn.var);
            }
            None => w.u8(0),
        }
    }
    match &state.fusion_alpha {
        Some(a) => {
            w.u8(1);
            w.u32(a.len());
            w.f64s(a);
        }
        None => w.u8(0),
    }
    let digest: [u8; 32] = Sha256::digest(&w.0).into();
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (file is corrupt or truncated)"));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32");
    let text = std::str::from_utf8(r.bytes()?).map_err(|e| bad(e.to_string()))?;
    let config = Config::from_toml(text)?;
    if arch_hash(&config.arch) != hash {
        return Err(bad("architecture hash does not match the embedded config"));
    }
    let mut state = TrainState::new(config)?;
    state.epoch = r.u64()? as usize;
    state.step = r.u64()? as usize;
    state.total_steps = r.u64()? as usize;
    state.cycles = r.u64()? as usize;
    state.data_rng = r.rng()?;
    state.dropout_rng = r.rng()?;
    if r.u8()? == 1 {
        let c = r.u32()?;
        state.input_norm = Some(Normalizer {
            mean: r.f64s(c)?,
            std: r.f64s(c)?,
        });
    }
    let groups = r.u32()?;
    if groups != state.groups.len() {
        return Err(bad(format!("expected {} groups, found {groups}", state.groups.len())));
    }
    for g in state.groups.iter_mut() {
        let n = r.u32()?;
        if n != g.params.len() {
            return Err(bad(format!("expected {} parameters in a group, found {n}", g.params.len())));
        }
        for p in g.params.iter_mut() {
            let name = std::str::from_utf8(r.bytes()?).map_err(|e| bad(e.to_string()))?;
            if name != p.name {
                return Err(bad(format!("expected parameter {}, found {name}", p.name)));
            }
            let t = r.tensor()?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!("parameter {name} has shape {}, expected {}", t.shape(), p.value.shape())));
            }
            p.value = Arc::new(t);
        }
        g.opt.steps = r.u64()?;
        for side in [&mut g.opt.first, &mut g.opt.second] {
            let n = r.u32()?;
            if n != side.len() {
                return Err(bad("optimizer state does not match the parameters"));
            }
            for slot in side.iter_mut() {
                let t = r.tensor()?;
                if t.shape() != slot.shape() {
                    return Err(bad("optimizer state shape mismatch"));
                }
                *slot = t;
            }
        }
    }
    let layers = r.u32()?;
    if layers != state.layers.len() {
        return Err(bad(format!("expected {} layers, found {layers}", state.layers.len())));
    }
    for l in state.layers.iter_mut() {
        let flag = r.u8()?;
        match (&mut l.block.bn, flag) {
            (Some(bn), 1) => {
                let c = r.u32()?;
                if c != bn.mean.len() {
                    return Err(bad("batch-norm statistics size mismatch"));
                }
                bn.mean = r.f64s(c)?;
                bn.var = r.f64s(c)?;
            }
            (None, 0) => {}
            _ => return Err(bad("batch-norm layout does not match the architecture")),
        }
    }
    if r.u8()? == 1 {
        let n = r.u32()?;
        state.fusion_alpha = Some(r.f64s(n)?);
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and checks that it was trained for `arch`.
pub fn load_for(path: &Path, arch: &ArchSpec) -> Result<TrainState> {
    let state = load(path)?;
    let (want, got) = (arch_hash(arch), arch_hash(&state.config.arch));
    if want != got {
        return Err(bad(format!("architecture hash mismatch: expected {}, checkpoint has {}", hex(&want), hex(&got))));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use crate::testutil::lcg_tensor;
    use crate::training::tests::toy_config;

    fn trained(mut cfg: Config) -> TrainState {
        cfg.train.optimizer = crate::config::OptimizerKind::Adamw;
        let mut st = TrainState::new(cfg).unwrap();
        for i in 0..3 {
            let x = lcg_tensor(st.batch_shape(6), i);
            st.train_step(&x, &[0, 1, 2, 2, 1, 0], i as usize).unwrap();
        }
        st.fusion_alpha = Some(vec![0.25, -0.5]);
        st.input_norm = Some(Normalizer { mean: vec![0.1], std: vec![0.3] });
        st
    }

    fn assert_same(a: &TrainState, b: &TrainState) {
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            for ((_, pa), (_, pb)) in ga.params.iter().zip(gb.params.iter()) {
                assert!(pa.value.bitwise_eq(&pb.value), "{}", pa.name);
            }
            assert_eq!(ga.opt.steps, gb.opt.steps);
            for (x, y) in ga.opt.first.iter().chain(&ga.opt.second).zip(gb.opt.first.iter().chain(&gb.opt.second)) {
                assert!(x.bitwise_eq(y));
            }
        }
        assert_eq!(a.fusion_alpha, b.fusion_alpha);
        assert_eq!(a.input_norm, b.input_norm);
        assert_eq!((a.epoch, a.step, a.total_steps), (b.epoch, b.step, b.total_steps));
    }

    #[test]
    fn round_trip_is_bit_exact_and_resumable() {
        let mut cfg = toy_config(4, 2);
        cfg.arch.blocks[1].norm = crate::blocks::NormKind::BatchNorm;
        let mut a = trained(cfg);
        let mut b = from_bytes(&to_bytes(&a).unwrap()).unwrap();
        assert_same(&a, &b);
        assert_eq!(a.layers[1].block.bn, b.layers[1].block.bn);
        let x = lcg_tensor(a.batch_shape(6), 40);
        let y = [1, 1, 0, 2, 0, 1];
        a.train_step(&x, &y, 9).unwrap();
        b.train_step(&x, &y, 9).unwrap();
        assert_same(&a, &b);
    }

    #[test]
    fn f32_params_use_narrow_records() {
        let mut cfg = toy_config(2, 1);
        cfg.train.precision = Precision::F32;
        let st = trained(cfg.clone());
        let mut wide = cfg;
        wide.train.precision = Precision::F64;
        let st64 = trained(wide);
        assert!(to_bytes(&st).unwrap().len() < to_bytes(&st64).unwrap().len());
        assert_same(&st, &from_bytes(&to_bytes(&st).unwrap()).unwrap());
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let st = trained(toy_config(2, 1));
        let bytes = to_bytes(&st).unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(from_bytes(b"NOTACKPT and more bytes to pass the length check......").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&st, &path).unwrap();
        load_for(&path, &st.config.arch).unwrap();
        let other = toy_config(4, 1).arch;
        assert!(load_for(&path, &other).unwrap_err().to_string().contains("hash"));
    }
}
