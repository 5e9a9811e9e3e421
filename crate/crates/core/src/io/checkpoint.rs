//! Checkpoint file: `OSCK`, u32 version, u64 header length, JSON header,
//! then a little-endian f32 blob addressed by the header's byte offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::tensor::{ModelParams, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OSCK";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset of the values within the blob.
    pub offset: u64,
    /// Offsets of the Adam moments, when saved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_offsets: Option<(u64, u64)>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Whether Adam moments and step were stored.
    pub has_optimizer: bool,
}

/// What [`Checkpoint::load_into`] did, by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Present in the destination but not in the checkpoint.
    pub fresh: Vec<String>,
    /// Present in the checkpoint but not in the destination.
    pub unused: Vec<String>,
}

fn push_f32s(blob: &mut Vec<u8>, v: &[f32]) -> u64 {
    let at = blob.len() as u64;
    for x in v {
        blob.extend(x.to_bits().to_le_bytes());
    }
    at
}

pub fn encode_checkpoint(kind: ModelKind, config: &ModelConfig, params: &ModelParams, with_optimizer: bool) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(params.num_values() * 4 * if with_optimizer { 3 } else { 1 });
    let mut tensors = Vec::with_capacity(params.len());
    for (name, e) in params.iter() {
        let offset = push_f32s(&mut blob, e.value.data());
        let adam_offsets = with_optimizer.then(|| (push_f32s(&mut blob, &e.m), push_f32s(&mut blob, &e.v)));
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: e.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            adam_offsets,
            frozen: e.frozen,
        });
    }
    let header = Header {
        kind,
        config: config.clone(),
        step: if with_optimizer { params.step } else { 0 },
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(blob);
    Ok(out)
}

fn unsupported(msg: impl Into<String>) -> Error {
    Error::UnsupportedFormat(msg.into())
}

fn read_f32s(blob: &[u8], offset: u64, n: usize, name: &str) -> Result<Vec<f32>> {
    let start = offset as usize;
    let end = start
        .checked_add(n * 4)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| unsupported(format!("tensor {name} runs past the end of the blob")))?;
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(unsupported("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(unsupported(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| unsupported("truncated checkpoint header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| unsupported(format!("bad checkpoint header: {e}")))?;
    let blob = &bytes[16 + hlen..];
    let mut params = ModelParams::new();
    let mut has_optimizer = !header.tensors.is_empty();
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(unsupported(format!("tensor {} has dtype {}", t.name, t.dtype)));
        }
        let n = t.shape.iter().product();
        let value = Tensor::new(t.shape.clone(), read_f32s(blob, t.offset, n, &t.name)?)?;
        params.insert(t.name.clone(), value)?;
        let e = params.entry_mut(&t.name).unwrap();
        e.frozen = t.frozen;
        match t.adam_offsets {
            Some((m, v)) => {
                e.m = read_f32s(blob, m, n, &t.name)?;
                e.v = read_f32s(blob, v, n, &t.name)?;
            }
            None => has_optimizer = false,
        }
    }
    params.step = header.step;
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        params,
        has_optimizer,
    })
}

pub fn save_checkpoint(
    path: &Path,
    kind: ModelKind,
    config: &ModelConfig,
    params: &ModelParams,
    with_optimizer: bool,
) -> Result<()> {
    atomic_write(path, &encode_checkpoint(kind, config, params, with_optimizer)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

impl Checkpoint {
    /// Copies matching entries into `dest`. A shared name with a different
    /// shape is always an error; with `strict`, so is any missing or extra
    /// name. Optimizer state is copied only when stored.
    pub fn load_into(&self, dest: &mut ModelParams, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut problems = Vec::new();
        for (name, e) in dest.iter() {
            match self.params.get(name) {
                Some(src) if src.shape() != e.value.shape() => problems.push(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    e.value.shape()
                )),
                Some(_) => report.loaded.push(name.to_string()),
                None => report.fresh.push(name.to_string()),
            }
        }
        report.unused = self
            .params
            .names()
            .filter(|n| dest.entry(n).is_none())
            .map(String::from)
            .collect();
        if strict {
            problems.extend(report.fresh.iter().map(|n| format!("{n}: missing from checkpoint")));
            problems.extend(report.unused.iter().map(|n| format!("{n}: not in model")));
        }
        if !problems.is_empty() {
            return Err(Error::IncompatibleCheckpoint(problems));
        }
        for name in &report.loaded {
            let src = self.params.entry(name).unwrap();
            let e = dest.entry_mut(name).unwrap();
            e.value = src.value.clone();
            e.frozen = src.frozen;
            if self.has_optimizer {
                e.m = src.m.clone();
                e.v = src.v.clone();
            }
        }
        if self.has_optimizer {
            dest.step = self.params.step;
        }
        Ok(report)
    }
}
