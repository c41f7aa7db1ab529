use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainConfig;
use crate::model::{ModelConfig, ModelError, VarModel, Variant};

const MAGIC: &[u8; 4] = b"NMCK";
const VERSION: u16 = 1;
/// Magic, version and header length.
const PREFIX_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported checkpoint version {found} at byte {offset}")]
    BadVersion { offset: usize, found: u16 },
    #[error("truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch over bytes 0..{offset}")]
    Checksum { offset: usize },
    #[error("header at byte {offset}: {detail}")]
    Header { offset: usize, detail: String },
    #[error("config mismatch in field {field}: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("tensor {index} mismatch: expected {expected}, found {found}")]
    TensorMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Run context stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub variant: Variant,
    pub train: Option<TrainConfig>,
    /// Epoch whose weights are stored.
    pub epoch: usize,
    /// ADAM steps taken before these weights.
    pub adam_steps: u64,
    /// Shuffling draws from stream `epoch` of a ChaCha8 generator seeded
    /// with this value.
    pub shuffle_seed: u64,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    /// Parameters, then running mean and variance per buffer, in payload order.
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: VarModel<f32>,
}

fn manifest(model: &VarModel<f32>) -> Vec<TensorEntry> {
    let params = model.params();
    let mut out: Vec<TensorEntry> = params
        .names()
        .iter()
        .zip(params.values())
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let buffers = model.buffers();
    for (n, s) in buffers.names().iter().zip(buffers.stats()) {
        out.push(TensorEntry {
            name: format!("{n}.running_mean"),
            shape: vec![s.mean.len()],
        });
        out.push(TensorEntry {
            name: format!("{n}.running_var"),
            shape: vec![s.var.len()],
        });
    }
    out
}

pub fn encode_checkpoint(model: &VarModel<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = Header {
        meta: meta.clone(),
        tensors: manifest(model),
    };
    let text = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + text.len() + 4 * model.param_count() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    let mut put = |v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for t in model.params().values() {
        put(t.data());
    }
    for s in model.buffers().stats() {
        put(&s.mean);
        put(&s.var);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(model: &VarModel<f32>, meta: &CheckpointMeta, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model, meta))?;
    Ok(())
}

/// First differing field between two configs, in declaration order.
fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Option<CheckpointError> {
    let fields = |c: &ModelConfig| {
        [
            ("preset", c.preset.clone()),
            ("panel_size", c.panel_size.to_string()),
            ("stem_channels", c.stem_channels.to_string()),
            ("step1_channels", c.step1_channels.to_string()),
            ("step2_channels", c.step2_channels.to_string()),
            ("mlp_hidden", c.mlp_hidden.to_string()),
        ]
    };
    fields(expected)
        .into_iter()
        .zip(fields(found))
        .find(|(a, b)| a.1 != b.1)
        .map(|((field, expected), (_, found))| CheckpointError::ConfigMismatch {
            field: format!("model.{field}"),
            expected,
            found,
        })
}

/// Validates checksum and, when `expected` is given, model-config
/// compatibility before any parameter is materialized.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    let need = |offset: usize, len: usize| {
        if bytes.len() < offset + len {
            Err(CheckpointError::Truncated {
                offset: bytes.len(),
                needed: offset + len - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(0, 4).map_err(|_| CheckpointError::BadMagic { offset: 0 })?;
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic { offset: 0 });
    }
    need(4, PREFIX_LEN - 4)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            offset: 4,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    need(PREFIX_LEN, header_len)?;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + header_len]).map_err(|e| CheckpointError::Header {
            offset: PREFIX_LEN,
            detail: e.to_string(),
        })?;
    let scalars: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let payload_at = PREFIX_LEN + header_len;
    need(payload_at, 4 * scalars + 4)?;
    let end = payload_at + 4 * scalars;
    if bytes.len() != end + 4 {
        return Err(CheckpointError::Header {
            offset: end + 4,
            detail: format!("{} trailing bytes", bytes.len() - end - 4),
        });
    }
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..end]) != stored {
        return Err(CheckpointError::Checksum { offset: end });
    }
    let meta = header.meta;
    if let Some(err) = expected.and_then(|e| config_diff(e, &meta.model)) {
        return Err(err);
    }

    let mut model = VarModel::<f32>::build_variant(&meta.model, meta.variant, 0)?;
    let want = manifest(&model);
    if want.len() != header.tensors.len() {
        return Err(CheckpointError::TensorMismatch {
            index: want.len().min(header.tensors.len()),
            expected: format!("{} tensors", want.len()),
            found: format!("{} tensors", header.tensors.len()),
        });
    }
    for (index, (w, f)) in want.iter().zip(&header.tensors).enumerate() {
        if w.name != f.name || w.shape != f.shape {
            return Err(CheckpointError::TensorMismatch {
                index,
                expected: format!("{} {:?}", w.name, w.shape),
                found: format!("{} {:?}", f.name, f.shape),
            });
        }
    }
    let mut values = bytes[payload_at..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut fill = |dst: &mut [f32]| {
        dst.iter_mut()
            .for_each(|d| *d = values.next().expect("sized by manifest"))
    };
    for t in model.params_mut().values_mut() {
        fill(t.data_mut());
    }
    for s in model.buffers_mut().stats_mut() {
        fill(&mut s.mean);
        fill(&mut s.var);
    }
    Ok(Checkpoint { meta, model })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?, expected)
}
