//! Little-endian raw array files, optionally with a JSON sidecar.
//!
//! A sidecar lives next to the array at `<path>.json` and records
//! `{"shape": [rows, cols], "dtype": "f32", "extra": {...}}`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: [usize; 2],
    dtype: String,
    extra: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_f32(array: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(array.len() * 4);
    for &v in array.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8], shape: (usize, usize)) -> Option<Array2<f64>> {
    if bytes.len() != shape.0 * shape.1 * 4 {
        return None;
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec(shape, values).ok()
}

pub fn decode_u8(bytes: &[u8], shape: (usize, usize)) -> Option<Array2<u8>> {
    Array2::from_shape_vec(shape, bytes.to_vec()).ok()
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `array` as `f32` with a sidecar carrying `extra`.
pub fn write_f32(path: &Path, array: &Array2<f64>, extra: serde_json::Value) -> Result<()> {
    write_bytes(path, &encode_f32(array))?;
    let (r, c) = array.dim();
    let sidecar = Sidecar {
        shape: [r, c],
        dtype: "f32".into(),
        extra,
    };
    write_bytes(&sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)
}

pub fn read_f32(path: &Path) -> Result<(Array2<f64>, serde_json::Value)> {
    let side_path = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&read_bytes(&side_path)?)?;
    if sidecar.dtype != "f32" {
        return Err(Error::Format {
            path: side_path,
            reason: format!("expected dtype f32, found {}", sidecar.dtype),
        });
    }
    let bytes = read_bytes(path)?;
    let array = decode_f32(&bytes, (sidecar.shape[0], sidecar.shape[1])).ok_or_else(|| {
        Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes do not hold a {}x{} f32 array",
                bytes.len(),
                sidecar.shape[0],
                sidecar.shape[1]
            ),
        }
    })?;
    Ok((array, sidecar.extra))
}
