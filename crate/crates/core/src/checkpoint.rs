//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `REIDCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every tensor as
//! little-endian `f32` values in the order listed by the header. Each header
//! entry records the tensor's name, shape, dtype, byte offset (relative to
//! the start of the data section) and byte length. Optimizer momentum buffers
//! are stored as entries named `momentum/<parameter name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::Vocabularies;
use crate::error::{ReidError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Grads;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"REIDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub vocabularies: Vocabularies,
    /// Number of completed training epochs.
    pub epoch: usize,
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocabularies: Vocabularies,
    pub epoch: usize,
    pub train_config: Option<TrainConfig>,
    pub momentum: Option<Grads<f32>>,
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:04}.bin")
}

fn ckpt_err(msg: impl Into<String>) -> ReidError {
    ReidError::Checkpoint(msg.into())
}

/// Serializes to bytes; `momentum` must be aligned with the model's parameters.
pub fn encode(
    model: &Model<f32>,
    vocabularies: &Vocabularies,
    epoch: usize,
    train_config: Option<&TrainConfig>,
    momentum: Option<&Grads<f32>>,
) -> Result<Vec<u8>> {
    let params = model.params();
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, value: &ArrayD<f32>| {
        let offset = data.len() as u64;
        for v in value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len: data.len() as u64 - offset,
        });
    };
    for (name, value) in params.iter() {
        push(name.to_string(), value);
    }
    if let Some(m) = momentum {
        for id in params.ids() {
            push(format!("{MOMENTUM_PREFIX}{}", params.name(id)), m.get(id));
        }
    }
    let header = CheckpointHeader {
        model_config: model.config().clone(),
        vocabularies: vocabularies.clone(),
        epoch,
        train_config: train_config.cloned(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ckpt_err("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..data_start])?;
    let data = &bytes[data_start..];

    // Rebuilding from the stored configuration fixes the expected names and shapes.
    let mut model = Model::<f32>::new(&header.model_config, 0)?;
    let mut momentum = model.params().zeros_like();
    let mut seen = vec![false; model.params().len()];
    let mut has_momentum = false;
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(ckpt_err(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.len as usize)
            .filter(|&e| e <= data.len() && entry.len as usize == 4 * count)
            .ok_or_else(|| ckpt_err(format!("tensor {} has an invalid byte range", entry.name)))?;
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| ckpt_err(e.to_string()))?;
        let (name, is_momentum) = match entry.name.strip_prefix(MOMENTUM_PREFIX) {
            Some(n) => (n, true),
            None => (entry.name.as_str(), false),
        };
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| ckpt_err(format!("unexpected tensor {}", entry.name)))?;
        let expected = model.params().get(id).shape().to_vec();
        if expected != entry.shape {
            return Err(ckpt_err(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        if is_momentum {
            has_momentum = true;
            *momentum.get_mut(id) = array;
        } else {
            model.params_mut().set(id, array)?;
            seen[id.index()] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let id = model.params().ids().nth(missing).expect("index in range");
        return Err(ckpt_err(format!("missing tensor {}", model.params().name(id))));
    }
    Ok(Checkpoint {
        model,
        vocabularies: header.vocabularies,
        epoch: header.epoch,
        train_config: header.train_config,
        momentum: has_momentum.then_some(momentum),
    })
}

/// Writes atomically through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    vocabularies: &Vocabularies,
    epoch: usize,
    train_config: Option<&TrainConfig>,
    momentum: Option<&Grads<f32>>,
) -> Result<()> {
    write_atomic(path, &encode(model, vocabularies, epoch, train_config, momentum)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Hex SHA-256 of a checkpoint file, used to tie reports to their weights.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
