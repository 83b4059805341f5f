//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ATSK1\n" | u64 len | JSON metadata | u64 len | f32 parameters
//!           | u64 len | f32 optimizer moments (m then v, may be empty)
//!           | u32 CRC-32 of everything before it
//! ```
//!
//! Parameters are stored in store order as raw bits, so a round trip is
//! bit-exact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::NormStats;
use crate::model::{AutoTaskModel, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"ATSK1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the requested model: {}", fields.join(", "))]
    ConfigMismatch { fields: Vec<&'static str> },
}

impl CheckpointError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, CheckpointError::Io { .. })
    }
}

fn format_err(reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(reason.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step: u64,
    pub lrs: Vec<f64>,
}

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub seed: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    config: ModelConfig,
    norm: NormStats,
    tensors: Vec<TensorMeta>,
    training: TrainingInfo,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AutoTaskModel,
    pub training: TrainingInfo,
    pub optimizer: Option<Adam>,
}

fn push_f32s(out: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &AutoTaskModel, training: &TrainingInfo, optimizer: Option<&Adam>) -> Vec<u8> {
    let store = &model.store;
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        norm: model.norm.clone(),
        tensors: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        training: training.clone(),
        optimizer: optimizer.map(|o| OptimizerMeta {
            config: o.config,
            step: o.step,
            lrs: o.lrs.clone(),
        }),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(json.len() + 4 * store.numel() * 3 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);

    out.extend_from_slice(&(4 * store.numel() as u64).to_le_bytes());
    push_f32s(&mut out, store.flatten().into_iter());

    let moments: Vec<f32> = optimizer
        .map(|o| o.m.iter().chain(&o.v).flat_map(|t| t.data().iter().copied()).collect())
        .unwrap_or_default();
    out.extend_from_slice(&(4 * moments.len() as u64).to_le_bytes());
    push_f32s(&mut out, moments.into_iter());

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format_err(format!("{what} length {v} is too large")))
    }

    fn f32s(&mut self, what: &str) -> Result<Vec<f32>, CheckpointError> {
        let len = self.u64(what)?;
        if len % 4 != 0 {
            return Err(format_err(format!("{what} length {len} is not a multiple of 4")));
        }
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err("bad magic; not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(format_err("checksum mismatch"));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let meta_len = r.u64("metadata")?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| format_err(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {}", meta.format_version)));
    }
    let params = r.f32s("parameters")?;
    let moments = r.f32s("optimizer state")?;
    if r.pos != body.len() {
        return Err(format_err(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let mut model = AutoTaskModel::new(meta.config.clone(), meta.norm.clone(), 0)
        .map_err(|e| format_err(format!("stored configuration is invalid: {e}")))?;
    let expected: Vec<TensorMeta> = model
        .store
        .names()
        .iter()
        .zip(model.store.shapes())
        .map(|(name, shape)| TensorMeta { name: name.clone(), shape })
        .collect();
    if expected != meta.tensors {
        return Err(format_err("tensor table does not match the stored configuration"));
    }
    model
        .store
        .load_flat(&params)
        .map_err(|e| format_err(format!("parameters: {e}")))?;

    let optimizer = match meta.optimizer {
        None if moments.is_empty() => None,
        None => return Err(format_err("optimizer state without optimizer metadata")),
        Some(o) => {
            let shapes = model.store.shapes();
            if moments.len() != 2 * model.store.numel() || o.lrs.len() != shapes.len() {
                return Err(format_err("optimizer state does not match the parameter table"));
            }
            let mut adam = Adam::new(o.config, &shapes).map_err(|e| format_err(format!("optimizer: {e}")))?;
            adam.step = o.step;
            adam.lrs = o.lrs;
            let mut offset = 0;
            for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
                let n = t.numel();
                *t = Tensor::new(t.shape().to_vec(), moments[offset..offset + n].to_vec())
                    .map_err(|e| format_err(e.to_string()))?;
                offset += n;
            }
            Some(adam)
        }
    };
    Ok(Checkpoint {
        model,
        training: meta.training,
        optimizer,
    })
}

pub fn save(path: &Path, model: &AutoTaskModel, training: &TrainingInfo, optimizer: Option<&Adam>) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model, training, optimizer)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless its configuration equals
/// `expected`, naming every differing field.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load(path)?;
    let fields = ckpt.model.config.diff(expected);
    if !fields.is_empty() {
        return Err(CheckpointError::ConfigMismatch { fields });
    }
    Ok(ckpt)
}
