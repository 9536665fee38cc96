//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON header,
//! then every named tensor's values back to back in header order as
//! little-endian floats of the recorded dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;

use super::{ModelHandle, ParamSpec, UNetConfig};

const MAGIC: &[u8; 8] = b"TACKPT01";

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub training_step: u64,
    /// Hex SHA-256 of the recorded loss curve (see `train::curve_digest`).
    pub loss_curve_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub config: UNetConfig,
    pub init_seed: u64,
    pub frozen: bool,
    pub meta: CheckpointMeta,
    pub tensors: Vec<ParamSpec>,
    pub data_sha256: String,
}

pub fn save_checkpoint<T: Real>(
    model: &ModelHandle<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut data = Vec::with_capacity(model.num_params() * T::BYTES);
    for &v in model.params() {
        v.write_le(&mut data);
    }
    let header = CheckpointHeader {
        format_version: 1,
        dtype: T::DTYPE.to_string(),
        config: model.config().clone(),
        init_seed: model.init_seed(),
        frozen: model.is_frozen(),
        meta: meta.clone(),
        tensors: model.specs().to_vec(),
        data_sha256: hex(&Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, converting stored values to `T` when the dtypes differ.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelHandle<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    if hex(&Sha256::digest(data)) != header.data_sha256 {
        return Err(bad("tensor data checksum mismatch"));
    }
    let count: usize = header.tensors.iter().map(ParamSpec::len).sum();
    let params: Vec<T> = match header.dtype.as_str() {
        "f32" => decode::<f32, T>(data, count),
        "f64" => decode::<f64, T>(data, count),
        other => return Err(bad(&format!("unknown dtype {other}"))),
    }
    .ok_or_else(|| bad("tensor data length mismatch"))?;
    let model = ModelHandle::from_parts(header.config.clone(), params, header.frozen, header.init_seed)?;
    if model.specs() != header.tensors.as_slice() {
        return Err(bad("tensor table does not match the configured architecture"));
    }
    Ok((model, header))
}

fn decode<S: Real, T: Real>(data: &[u8], count: usize) -> Option<Vec<T>> {
    if data.len() != count * S::BYTES {
        return None;
    }
    Some(
        data.chunks_exact(S::BYTES)
            .map(|c| T::lit(S::read_le(c).as_f64()))
            .collect(),
    )
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
