//! On-disk datasets of aligned (low-dose, full-dose, segmentation) triples.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! samples/<id>.low.f32     little-endian f32, H x W
//! samples/<id>.full.f32    little-endian f32, H x W
//! samples/<id>.seg.u8      u8 labels, H x W
//! ```
//!
//! Every sample is a pure function of `(dataset seed, sample id)`: the phantom
//! and noise seeds are derived by hashing, so building with any number of
//! workers produces the same bytes.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ingest::{ingest_volumes, IngestConfig};
use super::phantom::{generate_phantom, PhantomSpec};
use crate::ctsim::{simulate_low_dose, Geometry, NoiseModel};
use crate::error::{Error, Result};
use crate::nets::checkpoint::hex;
use crate::rawio::{self, decode_f32, decode_u8, encode_f32};
use crate::{Image, SegMap, NUM_CLASSES};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub low_dose: Image,
    pub full_dose: Image,
    pub seg: SegMap,
    pub sample_id: String,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let dim = self.full_dose.dim();
        if self.low_dose.dim() != dim || self.seg.dim() != dim {
            return Err(Error::Dimension(format!(
                "sample {}: low {:?}, full {:?}, seg {:?}",
                self.sample_id,
                self.low_dose.dim(),
                dim,
                self.seg.dim()
            )));
        }
        if self.seg.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Dimension(format!("sample {}: label out of range", self.sample_id)));
        }
        if self.full_dose.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dimension(format!(
                "sample {}: full-dose values outside [0, 1]",
                self.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Unit that is assigned to a split as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    BySlice,
    ByVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Source {
    Phantom {
        spec: PhantomSpec,
    },
    Volumes {
        dir: PathBuf,
        ingest: IngestConfig,
    },
}

impl Source {
    fn split_mode(&self) -> SplitMode {
        match self {
            Source::Phantom { .. } => SplitMode::BySlice,
            Source::Volumes { .. } => SplitMode::ByVolume,
        }
    }

    fn image_size(&self) -> usize {
        match self {
            Source::Phantom { spec } => spec.image_size,
            Source::Volumes { ingest, .. } => ingest.image_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: Source,
    /// Number of phantoms, or an upper bound on ingested slices.
    pub count: usize,
    pub geometry: Geometry,
    /// Photon statistics; the per-sample noise seed is derived, so
    /// `rng_seed` here is ignored.
    pub noise: NoiseModel,
    pub split_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    /// Split unit: the volume name, or the id itself for phantoms.
    pub group: String,
    pub noise_seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub shape: [usize; 2],
    pub source: Source,
    pub geometry: Geometry,
    pub noise: NoiseModel,
    pub seed: u64,
    pub split_ratio: f64,
    pub split_mode: SplitMode,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// 64-bit seed from `(seed, tag, id)`.
pub fn derive_seed(seed: u64, tag: &str, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn sample_digest(low: &[u8], full: &[u8], seg: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(low);
    h.update(full);
    h.update(seg);
    hex(&h.finalize())
}

/// Assigns whole groups to train or test. The first `round(ratio * groups)`
/// groups in hash order go to train; both sides stay non-empty when there
/// are at least two groups.
pub fn assign_splits(groups: &[String], split_ratio: f64, seed: u64) -> Result<Vec<Split>> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {split_ratio}")));
    }
    let mut unique: Vec<&String> = groups.iter().collect();
    unique.sort();
    unique.dedup();
    let n = unique.len();
    let mut n_train = (split_ratio * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n;
    }
    unique.sort_by_key(|g| (derive_seed(seed, "split", g), g.to_string()));
    let train: std::collections::HashSet<&String> = unique[..n_train].iter().copied().collect();
    Ok(groups
        .iter()
        .map(|g| if train.contains(g) { Split::Train } else { Split::Test })
        .collect())
}

fn samples_dir(root: &Path) -> PathBuf {
    root.join("samples")
}

fn sample_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    let dir = samples_dir(root);
    [
        dir.join(format!("{id}.low.f32")),
        dir.join(format!("{id}.full.f32")),
        dir.join(format!("{id}.seg.u8")),
    ]
}

struct Raw {
    id: String,
    group: String,
    full: Image,
    seg: SegMap,
}

fn collect_sources(spec: &DatasetSpec) -> Result<Vec<Raw>> {
    match &spec.source {
        Source::Phantom { spec: phantom } => {
            phantom.validate()?;
            let ids: Vec<String> = (0..spec.count).map(|i| format!("p{i:05}")).collect();
            ids.into_iter()
                .map(|id| {
                    let (full, seg) = generate_phantom(phantom, derive_seed(spec.seed, "phantom", &id))?;
                    Ok(Raw {
                        group: id.clone(),
                        id,
                        full,
                        seg,
                    })
                })
                .collect()
        }
        Source::Volumes { dir, ingest } => Ok(ingest_volumes(dir, ingest)?
            .into_iter()
            .take(spec.count)
            .map(|s| Raw {
                id: format!("{}_s{:04}", s.volume, s.slice),
                group: s.volume,
                full: s.image,
                seg: s.seg,
            })
            .collect()),
    }
}

/// Generates or ingests full-dose slices, simulates their low-dose partners
/// and persists everything under `out_dir`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path, workers: usize) -> Result<DatasetManifest> {
    spec.geometry.validate()?;
    spec.noise.validate()?;
    if spec.count == 0 {
        return Err(Error::Config("dataset count must be positive".into()));
    }
    if spec.geometry.image_size != spec.source.image_size() {
        return Err(Error::Config(format!(
            "geometry image_size {} differs from source image_size {}",
            spec.geometry.image_size,
            spec.source.image_size()
        )));
    }
    if !(spec.split_ratio > 0.0 && spec.split_ratio < 1.0) {
        return Err(Error::Config(format!(
            "split_ratio must lie in (0, 1), got {}",
            spec.split_ratio
        )));
    }
    let raw = collect_sources(spec)?;
    if raw.is_empty() {
        return Err(Error::Config("source produced zero samples".into()));
    }
    let groups: Vec<String> = raw.iter().map(|r| r.group.clone()).collect();
    let splits = assign_splits(&groups, spec.split_ratio, spec.seed)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let root = out_dir.to_path_buf();
    let entries: Vec<SampleEntry> = pool.install(|| {
        raw.par_iter()
            .zip(splits.par_iter())
            .map(|(r, &split)| {
                if r.seg.iter().all(|&l| l == 0) {
                    return Err(Error::Config(format!("sample {} has an empty segmentation", r.id)));
                }
                let noise_seed = derive_seed(spec.seed, "noise", &r.id);
                let low = simulate_low_dose(&r.full, &spec.geometry, &spec.noise.with_seed(noise_seed))?;
                let bytes = [encode_f32(&low), encode_f32(&r.full), r.seg.iter().copied().collect()];
                for (path, b) in sample_paths(&root, &r.id).iter().zip(&bytes) {
                    rawio::write_bytes(path, b)?;
                }
                Ok(SampleEntry {
                    id: r.id.clone(),
                    split,
                    group: r.group.clone(),
                    noise_seed,
                    sha256: sample_digest(&bytes[0], &bytes[1], &bytes[2]),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let n = spec.geometry.image_size;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        shape: [n, n],
        source: spec.source.clone(),
        geometry: spec.geometry,
        noise: spec.noise.with_seed(spec.seed),
        seed: spec.seed,
        split_ratio: spec.split_ratio,
        split_mode: spec.source.split_mode(),
        samples: entries,
        root,
    };
    rawio::write_bytes(&out_dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let mut m: DatasetManifest = serde_json::from_slice(&rawio::read_bytes(&path)?)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path,
                reason: format!("unsupported manifest version {}", m.format_version),
            });
        }
        m.root = dir.to_path_buf();
        Ok(m)
    }

    pub fn image_size(&self) -> usize {
        self.shape[0]
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn ids_in(&self, which: Split) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.split == which)
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn entry(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Reads and verifies one sample.
    pub fn load_sample(&self, id: &str) -> Result<SamplePair> {
        let entry = self.entry(id).ok_or_else(|| Error::Usage(format!("unknown sample id {id:?}")))?;
        self.read_entry(entry)
    }

    fn read_entry(&self, entry: &SampleEntry) -> Result<SamplePair> {
        let corrupt = |reason: String| Error::Corruption {
            id: entry.id.clone(),
            reason,
        };
        let [low_p, full_p, seg_p] = sample_paths(&self.root, &entry.id);
        let (low_b, full_b, seg_b) = (
            rawio::read_bytes(&low_p)?,
            rawio::read_bytes(&full_p)?,
            rawio::read_bytes(&seg_p)?,
        );
        let digest = sample_digest(&low_b, &full_b, &seg_b);
        if digest != entry.sha256 {
            return Err(corrupt(format!("checksum {digest} != manifest {}", entry.sha256)));
        }
        let shape = (self.shape[0], self.shape[1]);
        let bad_shape = || corrupt(format!("array sizes do not match shape {shape:?}"));
        let pair = SamplePair {
            low_dose: decode_f32(&low_b, shape).ok_or_else(bad_shape)?,
            full_dose: decode_f32(&full_b, shape).ok_or_else(bad_shape)?,
            seg: decode_u8(&seg_b, shape).filter(|_| seg_b.len() == shape.0 * shape.1).ok_or_else(bad_shape)?,
            sample_id: entry.id.clone(),
        };
        pair.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(pair)
    }
}

/// Lazily reads one split, verifying each sample as it is produced.
pub struct SplitIter<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    pos: usize,
}

impl Iterator for SplitIter<'_> {
    type Item = Result<SamplePair>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = *self.order.get(self.pos)?;
        self.pos += 1;
        Some(self.manifest.read_entry(&self.manifest.samples[idx]))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.order.len() - self.pos;
        (left, Some(left))
    }
}

impl ExactSizeIterator for SplitIter<'_> {}

/// Samples of one split in manifest order, or shuffled by `shuffle_seed`.
pub fn load_split(manifest: &DatasetManifest, which: Split, shuffle_seed: Option<u64>) -> SplitIter<'_> {
    let mut order: Vec<usize> = manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == which)
        .map(|(i, _)| i)
        .collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    SplitIter {
        manifest,
        order,
        pos: 0,
    }
}
