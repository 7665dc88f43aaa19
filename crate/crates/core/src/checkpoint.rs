//! Single-file checkpoints: a JSON header followed by `MBT1` tensors.
//!
//! ```text
//! b"MBTCKPT1" | u32 LE header length | header JSON | MBT1 tensor * n
//! ```
//!
//! The header carries `kind`, `config`, `step`, `seed` and the ordered
//! parameter names under `tensors`. Parameters are stored as f32.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::ParamStore;
use crate::error::{MebtError, Result};
use crate::tensor::Tensor;
use crate::tensor_io::Array;

pub const CKPT_MAGIC: &[u8; 8] = b"MBTCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: Value,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<String>,
    #[serde(default)]
    pub extra: Value,
}

pub fn encode_checkpoint(header: &CheckpointHeader, store: &ParamStore) -> Result<Vec<u8>> {
    if header.tensors.as_slice() != store.names() {
        return Err(MebtError::logic("checkpoint header does not list the store's tensors"));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        let data: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
        out.extend_from_slice(&Array::f32(vec![t.rows(), t.cols()], data)?.encode());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore)> {
    if bytes.len() < 12 {
        return Err(MebtError::Format {
            offset: bytes.len(),
            msg: "truncated checkpoint header".into(),
        });
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(MebtError::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + len).ok_or(MebtError::Format {
        offset: bytes.len(),
        msg: "truncated checkpoint header".into(),
    })?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let mut pos = 12 + len;
    let mut store = ParamStore::new();
    for name in &header.tensors {
        let (array, used) = Array::decode(&bytes[pos..]).map_err(|e| match e {
            MebtError::Format { offset, msg } => MebtError::Format {
                offset: offset + pos,
                msg,
            },
            other => other,
        })?;
        let data = array
            .as_f32()
            .ok_or_else(|| MebtError::data(format!("parameter {name} is not f32")))?;
        let (rows, cols) = match array.dims.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(MebtError::data(format!("parameter {name} is not rank 2"))),
        };
        store.add(
            name.clone(),
            Tensor::from_vec(rows, cols, data.iter().map(|&v| v as f64).collect()),
        );
        pos += used;
    }
    if pos != bytes.len() {
        return Err(MebtError::Format {
            offset: pos,
            msg: "trailing bytes after checkpoint tensors".into(),
        });
    }
    Ok((header, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| MebtError::io(parent, e))?;
        }
    }
    let bytes = encode_checkpoint(header, store)?;
    std::fs::write(path, bytes).map_err(|e| MebtError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamStore)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MebtError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Copies values from `loaded` into `target` by parameter name, checking
/// shapes.
pub fn restore_params(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(MebtError::data(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for id in loaded.ids() {
        let name = loaded.name(id);
        let dst = target
            .find(name)
            .ok_or_else(|| MebtError::data(format!("unexpected parameter {name}")))?;
        if target.get(dst).shape() != loaded.get(id).shape() {
            return Err(MebtError::data(format!("shape mismatch for {name}")));
        }
        *target.get_mut(dst) = loaded.get(id).clone();
    }
    Ok(())
}
