//! Parameter checkpoints.
//!
//! A checkpoint is a versioned JSON container mapping parameter names to
//! shape plus flat data. Data is base64 of the raw little-endian `f64`
//! bytes, so a load/save cycle is bit-exact regardless of the values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    /// Byte order of the base64-encoded f64 data.
    byte_order: String,
    /// Free-form consumer metadata (e.g. the architecture the parameters
    /// belong to).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
    params: BTreeMap<String, ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: String,
}

/// Named parameter tensors, ordered by name.
pub type NamedParams = BTreeMap<String, Tensor>;

pub fn save_checkpoint(path: &Path, params: &NamedParams) -> Result<()> {
    save_checkpoint_with_meta(path, params, None)
}

pub fn save_checkpoint_with_meta(
    path: &Path,
    params: &NamedParams,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    for (name, tensor) in params {
        let mut bytes = Vec::with_capacity(tensor.numel() * 8);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.insert(
            name.clone(),
            ParamEntry {
                shape: tensor.shape().to_vec(),
                data: BASE64.encode(&bytes),
            },
        );
    }
    let file = CheckpointFile {
        version: FORMAT_VERSION,
        byte_order: "little-endian".to_string(),
        meta,
        params: entries,
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NamedParams> {
    Ok(load_checkpoint_with_meta(path)?.0)
}

pub fn load_checkpoint_with_meta(path: &Path) -> Result<(NamedParams, Option<serde_json::Value>)> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingImageFile(path.to_path_buf()))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            file.version
        )));
    }
    if file.byte_order != "little-endian" {
        return Err(Error::InvalidConfig(format!(
            "unsupported checkpoint byte order {}",
            file.byte_order
        )));
    }
    let mut out = BTreeMap::new();
    for (name, entry) in file.params {
        let bytes = BASE64.decode(entry.data.as_bytes()).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("base64 in parameter {name}: {e}"),
        })?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("parameter {name} byte length {} not a multiple of 8", bytes.len()),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok((out, file.meta))
}
