//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GASE"  u32 version  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 ndim, ndim × u32 dims, f32 payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Model parameters keep their names. Batch-norm running statistics are
//! stored as `<layer>.running_mean` / `<layer>.running_var`, the baseline
//! copy under a `baseline/` prefix and Adam moments as `adam.m/<name>` and
//! `adam.v/<name>`. Run metadata lives in `meta.config` and `meta.state`;
//! each of their values is an `f64` bit pattern split into four 16-bit
//! words (low word first), which `f32` represents exactly.

use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::model::{ModelConfig, ModelParams, RunningStats};
use crate::numkernel::{AdamState, Tensor};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"GASE";
pub const VERSION: u32 = 1;
const BASELINE: &str = "baseline/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const META_CONFIG: &str = "meta.config";
const META_STATE: &str = "meta.state";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor {0} missing")]
    Missing(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A saved run: configuration, actor, optional baseline and optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub actor: ModelParams<f32>,
    pub baseline: Option<ModelParams<f32>>,
    pub adam: Option<AdamState>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Checkpoint {
            config: state.config.clone(),
            actor: state.actor.clone(),
            baseline: Some(state.baseline.clone()),
            adam: Some(state.adam.clone()),
            epoch: state.epoch,
        }
    }

    pub fn into_state(self) -> Result<TrainState, CheckpointError> {
        let baseline = self.baseline.ok_or_else(|| CheckpointError::Missing("baseline parameters".into()))?;
        let adam = self.adam.ok_or_else(|| CheckpointError::Missing("optimizer state".into()))?;
        Ok(TrainState { config: self.config, actor: self.actor, baseline, adam, epoch: self.epoch })
    }
}

fn words(x: f64) -> [f32; 4] {
    let bits = x.to_bits();
    std::array::from_fn(|i| ((bits >> (16 * i)) & 0xffff) as f32)
}

fn unwords(w: &[f32]) -> Result<f64, CheckpointError> {
    let mut bits = 0u64;
    for (i, &v) in w.iter().enumerate() {
        if !(0.0..65536.0).contains(&v) || v.fract() != 0.0 {
            return Err(CheckpointError::Malformed(format!("metadata word {v} is not a 16-bit integer")));
        }
        bits |= (v as u64) << (16 * i);
    }
    Ok(f64::from_bits(bits))
}

fn packed(values: &[f64]) -> Tensor<f32> {
    let data: Vec<f32> = values.iter().flat_map(|&v| words(v)).collect();
    Tensor::new(vec![values.len(), 4], data).expect("non-empty metadata")
}

fn unpacked(t: &Tensor<f32>, name: &str, len: usize) -> Result<Vec<f64>, CheckpointError> {
    if t.shape() != [len, 4] {
        return Err(CheckpointError::Shape { name: name.into(), expected: vec![len, 4], found: t.shape().to_vec() });
    }
    t.data().chunks(4).map(unwords).collect()
}

fn config_values(c: &TrainConfig) -> Vec<f64> {
    let m = &c.model;
    vec![
        m.d_model as f64,
        m.layers as f64,
        m.heads as f64,
        m.neighbor_rate,
        c.n as f64,
        c.epochs as f64,
        c.steps_per_epoch as f64,
        c.batch_size as f64,
        c.lr,
        c.lr_decay,
        c.alpha,
        m.clip,
        c.capacity,
        c.val_size as f64,
        c.max_grad_norm,
    ]
}

fn config_from(v: &[f64], seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            d_model: v[0] as usize,
            layers: v[1] as usize,
            heads: v[2] as usize,
            neighbor_rate: v[3],
            clip: v[11],
        },
        n: v[4] as usize,
        epochs: v[5] as usize,
        steps_per_epoch: v[6] as usize,
        batch_size: v[7] as usize,
        lr: v[8],
        lr_decay: v[9],
        alpha: v[10],
        capacity: v[12],
        val_size: v[13] as usize,
        max_grad_norm: v[14],
        seed,
    }
}

fn push_params(out: &mut IndexMap<String, Tensor<f32>>, prefix: &str, p: &ModelParams<f32>) {
    for (k, t) in &p.tensors {
        out.insert(format!("{prefix}{k}"), t.clone());
    }
    for (k, r) in &p.running {
        let d = r.mean.len();
        out.insert(format!("{prefix}{k}.running_mean"), Tensor::new(vec![d], r.mean.clone()).expect("d > 0"));
        out.insert(format!("{prefix}{k}.running_var"), Tensor::new(vec![d], r.var.clone()).expect("d > 0"));
    }
}

/// Named tensors in file order.
pub fn to_tensors(ck: &Checkpoint) -> IndexMap<String, Tensor<f32>> {
    let mut out = IndexMap::new();
    out.insert(META_CONFIG.to_string(), packed(&config_values(&ck.config)));
    let (step, lr) = ck.adam.as_ref().map_or((0, ck.config.lr), |a| (a.step, a.lr));
    out.insert(
        META_STATE.to_string(),
        packed(&[ck.epoch as f64, step as f64, lr, f64::from_bits(ck.config.seed)]),
    );
    push_params(&mut out, "", &ck.actor);
    if let Some(b) = &ck.baseline {
        push_params(&mut out, BASELINE, b);
    }
    if let Some(a) = &ck.adam {
        for (prefix, moments) in [(ADAM_M, &a.m), (ADAM_V, &a.v)] {
            for (k, v) in moments {
                let shape = ck.actor.tensors[k].shape().to_vec();
                out.insert(format!("{prefix}{k}"), Tensor::new(shape, v.clone()).expect("moment matches param"));
            }
        }
    }
    out
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let tensors = to_tensors(ck);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses the raw tensor list, checking magic, version and checksum.
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<IndexMap<String, Tensor<f32>>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        out.insert(name, t);
    }
    if r.pos != body.len() {
        // either trailing garbage or a cut that landed on a tensor boundary
        return Err(CheckpointError::Truncated(r.pos));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(CheckpointError::Checksum);
    }
    Ok(out)
}

fn take_params(
    tensors: &mut IndexMap<String, Tensor<f32>>,
    prefix: &str,
    config: &ModelConfig,
) -> Result<ModelParams<f32>, CheckpointError> {
    let mut params = IndexMap::new();
    for (name, shape) in config.param_shapes() {
        let key = format!("{prefix}{name}");
        let t = tensors.shift_remove(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::Shape { name: key, expected: shape, found: t.shape().to_vec() });
        }
        params.insert(name, t);
    }
    let mut running = IndexMap::new();
    for layer in config.norm_layers() {
        let mut stat = |what: &str| -> Result<Vec<f32>, CheckpointError> {
            let key = format!("{prefix}{layer}.{what}");
            let t = tensors.shift_remove(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
            if t.shape() != [config.d_model] {
                return Err(CheckpointError::Shape { name: key, expected: vec![config.d_model], found: t.shape().to_vec() });
            }
            Ok(t.into_data())
        };
        let mean = stat("running_mean")?;
        let var = stat("running_var")?;
        running.insert(layer, RunningStats { mean, var });
    }
    Ok(ModelParams { config: config.clone(), tensors: params, running })
}

/// Decodes a checkpoint. With `expected`, the stored tensors must have
/// exactly the shapes that configuration produces.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    let mut tensors = tensors_from_bytes(bytes)?;
    let cfg_t = tensors.shift_remove(META_CONFIG).ok_or_else(|| CheckpointError::Missing(META_CONFIG.into()))?;
    let state_t = tensors.shift_remove(META_STATE).ok_or_else(|| CheckpointError::Missing(META_STATE.into()))?;
    let vals = unpacked(&cfg_t, META_CONFIG, 15)?;
    let st = unpacked(&state_t, META_STATE, 4)?;
    let config = config_from(&vals, st[3].to_bits());
    config.model.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let model = expected.unwrap_or(&config.model);
    let mut actor = take_params(&mut tensors, "", model)?;
    // the stored neighbour rate and clip travel with the weights
    actor.config = ModelConfig { neighbor_rate: config.model.neighbor_rate, clip: config.model.clip, ..model.clone() };
    let baseline = if tensors.keys().any(|k| k.starts_with(BASELINE)) {
        let mut b = take_params(&mut tensors, BASELINE, model)?;
        b.config = actor.config.clone();
        Some(b)
    } else {
        None
    };
    let mut adam = AdamState::new(config.lr, config.lr_decay);
    adam.step = st[1] as u64;
    adam.lr = st[2];
    for (name, p) in &actor.tensors {
        for (prefix, slot) in [(ADAM_M, &mut adam.m), (ADAM_V, &mut adam.v)] {
            let key = format!("{prefix}{name}");
            if let Some(t) = tensors.shift_remove(&key) {
                if t.shape() != p.shape() {
                    return Err(CheckpointError::Shape { name: key, expected: p.shape().to_vec(), found: t.shape().to_vec() });
                }
                slot.insert(name.clone(), t.into_data());
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {extra}")));
    }
    let has_adam = adam.step > 0 || !adam.m.is_empty() || baseline.is_some();
    Ok(Checkpoint { config, actor, baseline, adam: has_adam.then_some(adam), epoch: st[0] as usize })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(ck))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?, None)
}

/// Loads and checks every tensor shape against `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?, Some(expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Preset;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::preset(Preset::Desk, 20, None).unwrap();
        config.model = ModelConfig { d_model: 8, layers: 2, heads: 2, ..Default::default() };
        config.seed = 0xdead_beef_1234_5678;
        let mut state = TrainState::new(&config).unwrap();
        state.actor.running["enc.node_bn"].mean[3] = 0.25;
        state.adam.m.insert("dec.wq".into(), vec![0.5; 64]);
        state.adam.v.insert("dec.wq".into(), vec![0.125; 64]);
        state.adam.step = 7;
        state.adam.lr = 3e-4 * 0.96 * 0.96;
        state.epoch = 2;
        Checkpoint::from_state(&state)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = from_bytes(&to_bytes(&ck), None).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config.seed, 0xdead_beef_1234_5678);
    }

    #[test]
    fn corrupted_magic() {
        let mut b = to_bytes(&sample());
        b[1] = b'X';
        assert!(matches!(from_bytes(&b, None), Err(CheckpointError::Magic)));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut b = to_bytes(&sample());
        let mid = b.len() / 2;
        b[mid] ^= 0x40;
        assert!(from_bytes(&b, None).is_err());
    }

    #[test]
    fn truncation_detected() {
        let b = to_bytes(&sample());
        for cut in [10, 100, b.len() - 5, b.len() - 1] {
            assert!(from_bytes(&b[..cut], None).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn version_checked() {
        let mut b = to_bytes(&sample());
        b[4] = 9;
        assert!(matches!(from_bytes(&b, None), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn wider_model_rejected_naming_first_tensor() {
        let b = to_bytes(&sample());
        let want = ModelConfig { d_model: 4, layers: 2, heads: 2, ..Default::default() };
        match from_bytes(&b, Some(&want)) {
            Err(CheckpointError::Shape { name, .. }) => assert_eq!(name, "enc.depot.w"),
            other => panic!("{other:?}"),
        }
    }
}
