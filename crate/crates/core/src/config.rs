//! Run configuration: one TOML document with `data`, `geometry`, `noise`,
//! `net`, `train` and `eval` sections. Every field has a default; unknown keys
//! are rejected; individual fields can be overridden by dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctsim::{Filter, Geometry, NoiseModel, DEFAULT_ATTENUATION_SCALE, DEFAULT_PHOTON_COUNT};
use crate::data::{IngestConfig, KeepRule, PhantomSpec, Source, Window};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_DENOISER_SIGMA;
use crate::losses::check_weight;
use crate::nets::UNetConfig;
use crate::train::{SchedulerConfig, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "TACT_OUTPUT_ROOT";
/// File name of the effective configuration echoed into output directories.
pub const ECHO_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub split_ratio: f64,
    pub image_size: usize,
    /// Phantom generator settings; defaults scale with `image_size`.
    pub phantom: Option<PhantomSpec>,
    /// Ingest raw-slab volumes from this directory instead of phantoms.
    pub volumes_dir: Option<PathBuf>,
    pub window: Window,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 1000,
            split_ratio: 0.8,
            image_size: 128,
            phantom: None,
            volumes_dir: None,
            window: Window::MinMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub photon_count: f64,
    pub attenuation_scale: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            photon_count: DEFAULT_PHOTON_COUNT,
            attenuation_scale: DEFAULT_ATTENUATION_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub depth: usize,
    pub base_channels: usize,
    /// Group-norm groups per block; 0 disables normalisation.
    pub norm_groups: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            norm_groups: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Defaults to half the image size.
    pub roi_radius: Option<usize>,
    pub fbp_filter: Filter,
    pub denoiser_sigma: f64,
    /// Number of test samples rendered into the gallery.
    pub gallery: usize,
    /// Task-adaptive weights trained by `repro-toy`; 0 is the Base U-Net.
    pub alphas: Vec<f64>,
    /// Joint-training weights trained by `repro-toy`.
    pub joint_cs: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            roi_radius: None,
            fbp_filter: Filter::HannRamp,
            denoiser_sigma: DEFAULT_DENOISER_SIGMA,
            gallery: 4,
            alphas: vec![0.0, 0.5, 0.9],
            joint_cs: vec![0.5, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub geometry: Geometry,
    pub noise: NoiseSection,
    pub net: NetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            geometry: Geometry::default(),
            noise: NoiseSection::default(),
            net: NetSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// The desk-scale experiment: 64x64 phantoms, 500 train / 100 test.
    pub fn toy() -> Self {
        let base = Self::default();
        Self {
            seed: 7,
            data: DataSection {
                count: 600,
                split_ratio: 500.0 / 600.0,
                image_size: 64,
                ..base.data
            },
            geometry: Geometry {
                num_angles: 90,
                num_detectors: Geometry::min_detectors(64),
                image_size: 64,
            },
            noise: NoiseSection {
                photon_count: 1024.0,
                ..base.noise
            },
            net: NetSection {
                depth: 3,
                base_channels: 8,
                norm_groups: 4,
            },
            train: TrainConfig {
                max_epochs: 12,
                batch_size: 4,
                learning_rate: 2e-3,
                scheduler: SchedulerConfig::PlateauDecay {
                    factor: 0.5,
                    patience: 2,
                },
                early_stop_patience: 4,
                ..base.train
            },
            eval: base.eval,
        }
    }

    pub fn from_toml(text: &str, base: RunConfig, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let file: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        merge(&mut value, file);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (if any) on top of `base`, then applies overrides.
    pub fn load(path: Option<&Path>, base: RunConfig, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, base, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        crate::rawio::write_bytes(&dir.join(ECHO_FILE), self.to_toml()?.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.geometry.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "geometry.image_size {} differs from data.image_size {}",
                self.geometry.image_size, self.data.image_size
            )));
        }
        self.noise_model().validate()?;
        self.recon_net().validate()?;
        self.recon_net().check_input(self.data.image_size, self.data.image_size)?;
        self.train.validate()?;
        if let Some(p) = &self.data.phantom {
            p.validate()?;
            if p.image_size != self.data.image_size {
                return Err(Error::Config("data.phantom.image_size differs from data.image_size".into()));
            }
        }
        for &a in &self.eval.alphas {
            check_weight("alpha", a)?;
        }
        for &c in &self.eval.joint_cs {
            check_weight("c", c)?;
        }
        if let Some(r) = self.eval.roi_radius {
            crate::ctsim::roi_mask(self.data.image_size, r)?;
        }
        Ok(())
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            photon_count: self.noise.photon_count,
            attenuation_scale: self.noise.attenuation_scale,
            rng_seed: self.seed,
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        self.data
            .phantom
            .clone()
            .unwrap_or_else(|| PhantomSpec::for_size(self.data.image_size))
    }

    pub fn source(&self) -> Source {
        match &self.data.volumes_dir {
            Some(dir) => Source::Volumes {
                dir: dir.clone(),
                ingest: IngestConfig {
                    image_size: self.data.image_size,
                    window: self.data.window,
                    keep_rule: KeepRule::NonEmptySeg,
                },
            },
            None => Source::Phantom {
                spec: self.phantom_spec(),
            },
        }
    }

    pub fn recon_net(&self) -> UNetConfig {
        UNetConfig::reconstruction(self.net.depth, self.net.base_channels).with_norm_groups(self.net.norm_groups)
    }

    pub fn seg_net(&self) -> UNetConfig {
        UNetConfig::segmentation(self.net.depth, self.net.base_channels).with_norm_groups(self.net.norm_groups)
    }

    pub fn roi_radius(&self) -> usize {
        self.eval.roi_radius.unwrap_or(self.data.image_size / 2)
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `section.field=value`. The value is parsed as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(value: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not of the form key=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = value;
    for (i, key) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {} is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Usage(format!("empty override path in {assignment:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        for c in [RunConfig::default(), RunConfig::toy()] {
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text, RunConfig::default(), &[]).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nlearning_rat = 0.1\n", RunConfig::default(), &[]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn dotted_overrides_win_over_file() {
        let c = RunConfig::from_toml(
            "[train]\nmax_epochs = 3\n",
            RunConfig::toy(),
            &["train.max_epochs=5".into(), "eval.alphas=[0.0, 0.25]".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(c.train.max_epochs, 5);
        assert_eq!(c.eval.alphas, vec![0.0, 0.25]);
        assert_eq!(c.seed, 9);
        assert_eq!(c.train_config().seed, 9);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for o in ["eval.alphas=[1.5]", "data.image_size=60", "noise.photon_count=0"] {
            assert!(
                RunConfig::from_toml("", RunConfig::toy(), &[o.into()]).is_err(),
                "{o} accepted"
            );
        }
    }
}
