//! Raw-slab volume adapter.
//!
//! A volume directory holds pairs `<name>.vol` (intensities) and `<name>.seg`
//! (labels). Both files share the slab layout:
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 8     | magic `TACTSLAB`                                     |
//! | 12    | `u32` LE dims: slices, rows, cols                    |
//! | 12    | `f32` LE voxel spacing: slice, row, col (mm)         |
//! | 4     | `u32` LE dtype code: 1 = `f32`, 2 = `u8`, 3 = `i16`  |
//! | ...   | voxels, slice-major then row-major, little-endian    |
//!
//! Label volumes must use dtype `u8` with values in {0, 1, 2}.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Image, SegMap, NUM_CLASSES};

pub const SLAB_MAGIC: &[u8; 8] = b"TACTSLAB";
const HEADER_LEN: usize = 8 + 12 + 12 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlabDtype {
    F32 = 1,
    U8 = 2,
    I16 = 3,
}

impl SlabDtype {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(SlabDtype::F32),
            2 => Some(SlabDtype::U8),
            3 => Some(SlabDtype::I16),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            SlabDtype::F32 => 4,
            SlabDtype::U8 => 1,
            SlabDtype::I16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub voxels: Array3<f64>,
    pub spacing: [f32; 3],
    pub dtype: SlabDtype,
}

/// Slice filter applied during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepRule {
    /// Keep slices whose label map contains any foreground pixel.
    NonEmptySeg,
}

/// Intensity window mapped onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Window {
    /// Per-volume minimum and maximum.
    MinMax,
    Fixed { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub image_size: usize,
    pub window: Window,
    pub keep_rule: KeepRule,
}

#[derive(Debug, Clone)]
pub struct IngestedSlice {
    pub volume: String,
    pub slice: usize,
    pub image: Image,
    pub seg: SegMap,
}

pub fn write_slab(path: &Path, voxels: &Array3<f64>, spacing: [f32; 3], dtype: SlabDtype) -> Result<()> {
    let (d, h, w) = voxels.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + voxels.len() * dtype.size());
    out.extend_from_slice(SLAB_MAGIC);
    for v in [d, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    for &v in voxels.iter() {
        match dtype {
            SlabDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            SlabDtype::U8 => out.push(v as u8),
            SlabDtype::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
        }
    }
    crate::rawio::write_bytes(path, &out)
}

pub fn read_slab(path: &Path) -> Result<Slab> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != SLAB_MAGIC {
        return Err(bad("missing slab header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing = [f32_at(20), f32_at(24), f32_at(28)];
    let dtype = SlabDtype::from_code(u32_at(32)).ok_or_else(|| bad(format!("unknown dtype code {}", u32_at(32))))?;
    let count = dims.iter().product::<usize>();
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * dtype.size() {
        return Err(bad(format!(
            "expected {} voxel bytes for dims {dims:?}, found {}",
            count * dtype.size(),
            body.len()
        )));
    }
    let values: Vec<f64> = match dtype {
        SlabDtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        SlabDtype::U8 => body.iter().map(|&b| b as f64).collect(),
        SlabDtype::I16 => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite voxel".into()));
    }
    let voxels = Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
        .map_err(|e| bad(e.to_string()))?;
    Ok(Slab {
        voxels,
        spacing,
        dtype,
    })
}

fn resize_bilinear(src: &Array2<f64>, n: usize) -> Image {
    let (h, w) = src.dim();
    if (h, w) == (n, n) {
        return src.clone();
    }
    // Align pixel centres of source and target grids.
    let sy = h as f64 / n as f64;
    let sx = w as f64 / n as f64;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        (1.0 - fy) * ((1.0 - fx) * src[[y0, x0]] + fx * src[[y0, x1]])
            + fy * ((1.0 - fx) * src[[y1, x0]] + fx * src[[y1, x1]])
    })
}

fn resize_nearest(src: &SegMap, n: usize) -> SegMap {
    let (h, w) = src.dim();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let y = ((i as f64 + 0.5) * h as f64 / n as f64).floor() as usize;
        let x = ((j as f64 + 0.5) * w as f64 / n as f64).floor() as usize;
        src[[y.min(h - 1), x.min(w - 1)]]
    })
}

/// Sorted `<name>.vol` files in `dir`, each with its required `.seg` partner.
fn volume_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("vol") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let vol = dir.join(format!("{name}.vol"));
        let seg = dir.join(format!("{name}.seg"));
        if !seg.is_file() {
            return Err(Error::Ingestion {
                path: vol,
                reason: format!("missing segmentation partner {}", seg.display()),
            });
        }
        pairs.push((name, vol, seg));
    }
    Ok(pairs)
}

/// Slices every volume in `dir`, normalises intensities through the window,
/// resizes to `image_size` and applies the keep rule.
pub fn ingest_volumes(dir: &Path, config: &IngestConfig) -> Result<Vec<IngestedSlice>> {
    if config.image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    let mut out = Vec::new();
    for (name, vol_path, seg_path) in volume_pairs(dir)? {
        let vol = read_slab(&vol_path)?;
        let seg = read_slab(&seg_path)?;
        if vol.voxels.dim() != seg.voxels.dim() {
            return Err(Error::Ingestion {
                path: seg_path,
                reason: format!(
                    "label dims {:?} differ from volume dims {:?}",
                    seg.voxels.dim(),
                    vol.voxels.dim()
                ),
            });
        }
        if seg.dtype != SlabDtype::U8 || seg.voxels.iter().any(|&v| v >= NUM_CLASSES as f64) {
            return Err(Error::Format {
                path: seg_path,
                reason: "labels must be u8 values in {0, 1, 2}".into(),
            });
        }
        let (low, high) = match config.window {
            Window::MinMax => {
                let lo = vol.voxels.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vol.voxels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
            Window::Fixed { low, high } => (low, high),
        };
        let span = if high > low { high - low } else { 1.0 };
        for (k, (v_slice, s_slice)) in vol.voxels.outer_iter().zip(seg.voxels.outer_iter()).enumerate() {
            let labels = s_slice.mapv(|v| v as u8);
            let keep = match config.keep_rule {
                KeepRule::NonEmptySeg => labels.iter().any(|&l| l != 0),
            };
            if !keep {
                continue;
            }
            let norm = v_slice.mapv(|v| ((v - low) / span).clamp(0.0, 1.0));
            let image = resize_bilinear(&norm, config.image_size).mapv(|v| v.clamp(0.0, 1.0));
            let seg_map = resize_nearest(&labels, config.image_size);
            if seg_map.iter().all(|&l| l == 0) {
                continue;
            }
            out.push(IngestedSlice {
                volume: name.clone(),
                slice: k,
                image,
                seg: seg_map,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize) -> IngestConfig {
        IngestConfig {
            image_size: n,
            window: Window::MinMax,
            keep_rule: KeepRule::NonEmptySeg,
        }
    }

    fn write_pair(dir: &Path, name: &str, seg_slices: &[bool]) {
        let d = seg_slices.len();
        let vol = Array3::from_shape_fn((d, 8, 8), |(k, i, j)| -1000.0 + (k * 64 + i * 8 + j) as f64 * 10.0);
        let seg = Array3::from_shape_fn((d, 8, 8), |(k, i, j)| {
            if seg_slices[k] && (2..6).contains(&i) && (2..6).contains(&j) {
                if i == 3 && j == 3 {
                    2.0
                } else {
                    1.0
                }
            } else {
                0.0
            }
        });
        write_slab(&dir.join(format!("{name}.vol")), &vol, [1.0, 0.7, 0.7], SlabDtype::I16).unwrap();
        write_slab(&dir.join(format!("{name}.seg")), &seg, [1.0, 0.7, 0.7], SlabDtype::U8).unwrap();
    }

    #[test]
    fn keeps_only_slices_with_foreground() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", &[false, true, false]);
        let out = ingest_volumes(dir.path(), &config(16)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].slice, 1);
        assert_eq!(out[0].image.dim(), (16, 16));
        for s in &out {
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.seg.iter().all(|&v| v <= 2));
        }
    }

    #[test]
    fn empty_volumes_yield_nothing() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", &[false, false]);
        assert!(ingest_volumes(dir.path(), &config(8)).unwrap().is_empty());
    }

    #[test]
    fn missing_partner_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", &[true]);
        fs::remove_file(dir.path().join("a.seg")).unwrap();
        match ingest_volumes(dir.path(), &config(8)) {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("a.vol")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_slab_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", &[true]);
        let p = dir.path().join("a.vol");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(ingest_volumes(dir.path(), &config(8)), Err(Error::Format { .. })));
    }

    #[test]
    fn slab_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vol");
        let v = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a + b * c) as f64 - 2.5);
        write_slab(&p, &v, [2.0, 1.0, 1.0], SlabDtype::F32).unwrap();
        let s = read_slab(&p).unwrap();
        assert_eq!(s.voxels, v);
        assert_eq!(s.spacing, [2.0, 1.0, 1.0]);
    }
}
