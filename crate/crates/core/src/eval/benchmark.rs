//! Runs every method over the test split and aggregates the metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoise::Denoiser;
use super::metrics::{dice_eval_with_labels, psnr_roi, ssim_roi};
use crate::ctsim::{fbp, radon, Filter, Geometry};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::nets::{reconstruct, ModelHandle};
use crate::real::Real;
use crate::{Image, Mask, SegMap};

pub enum MethodKind<T> {
    /// The simulated low-dose image itself.
    LowDose,
    /// Re-projection of the low-dose image followed by FBP with `filter`.
    Fbp { geometry: Geometry, filter: Filter },
    Denoiser(Box<dyn Denoiser>),
    Network(ModelHandle<T>),
    /// Substitutes the ground-truth full-dose image.
    FullDose,
}

/// A named transform from a test sample to the image being scored.
pub struct MethodAdapter<T> {
    pub name: String,
    pub kind: MethodKind<T>,
}

impl<T: Real> MethodAdapter<T> {
    pub fn low_dose() -> Self {
        Self {
            name: "Low-dose".into(),
            kind: MethodKind::LowDose,
        }
    }

    pub fn fbp(geometry: Geometry, filter: Filter) -> Self {
        Self {
            name: "FBP".into(),
            kind: MethodKind::Fbp { geometry, filter },
        }
    }

    pub fn denoiser(d: Box<dyn Denoiser>) -> Self {
        Self {
            name: d.name(),
            kind: MethodKind::Denoiser(d),
        }
    }

    pub fn network(name: impl Into<String>, model: ModelHandle<T>) -> Self {
        Self {
            name: name.into(),
            kind: MethodKind::Network(model),
        }
    }

    pub fn full_dose() -> Self {
        Self {
            name: "Full-dose".into(),
            kind: MethodKind::FullDose,
        }
    }

    /// True for the rows that bracket the reconstruction methods.
    pub fn is_reference(&self) -> bool {
        matches!(self.kind, MethodKind::LowDose | MethodKind::FullDose)
    }

    pub fn apply(&self, sample: &SamplePair) -> Result<Image> {
        let out = match &self.kind {
            MethodKind::LowDose => sample.low_dose.clone(),
            MethodKind::Fbp { geometry, filter } => fbp(&radon(&sample.low_dose, geometry)?, *filter)?,
            MethodKind::Denoiser(d) => d.denoise(&sample.low_dose)?,
            MethodKind::Network(m) => reconstruct(m, &sample.low_dose)?,
            MethodKind::FullDose => sample.full_dose.clone(),
        };
        if out.dim() != sample.low_dose.dim() {
            return Err(Error::Dimension(format!(
                "{} produced {:?} for a {:?} input",
                self.name,
                out.dim(),
                sample.low_dose.dim()
            )));
        }
        if out.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Usage(format!("{} produced values outside [0, 1]", self.name)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub psnr: f64,
    pub ssim: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub n: usize,
    /// Set when the method failed on some samples; those are excluded.
    pub partial: bool,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub records: Vec<MetricRecord>,
    pub sample_ids: Vec<String>,
    /// `scores[method][sample]`; `None` where the method failed.
    pub scores: Vec<Vec<Option<SampleScore>>>,
}

/// Population mean and standard deviation, computed in two passes.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Image and predicted labels a method produces for one sample, with scores.
pub fn score_sample<T: Real>(
    method: &MethodAdapter<T>,
    sample: &SamplePair,
    seg_model: &ModelHandle<T>,
    mask: &Mask,
) -> Result<(Image, SegMap, SampleScore)> {
    let out = method.apply(sample)?;
    let psnr = psnr_roi(&out, &sample.full_dose, mask, 1.0)?;
    let ssim = ssim_roi(&out, &sample.full_dose, mask)?;
    let (dice, labels) = dice_eval_with_labels(&out, &sample.seg, seg_model)?;
    Ok((out, labels, SampleScore { psnr, ssim, dice }))
}

/// Scores every method on every test sample. Per-sample work runs on up to
/// `workers` threads; aggregation is sequential in sample order, so results
/// do not depend on the worker count.
pub fn run_benchmark<T: Real>(
    methods: &[MethodAdapter<T>],
    test: &[SamplePair],
    seg_model: &ModelHandle<T>,
    mask: &Mask,
    workers: usize,
) -> Result<BenchmarkResult> {
    if test.is_empty() {
        return Err(Error::Config("benchmark needs a non-empty test split".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("benchmark needs at least one method".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let per_sample: Vec<Vec<Result<SampleScore>>> = pool.install(|| {
        test.par_iter()
            .map(|s| {
                methods
                    .iter()
                    .map(|m| score_sample(m, s, seg_model, mask).map(|(_, _, sc)| sc))
                    .collect()
            })
            .collect()
    });

    let mut records = Vec::with_capacity(methods.len());
    let mut scores = Vec::with_capacity(methods.len());
    for (k, method) in methods.iter().enumerate() {
        let mut ok = Vec::new();
        let mut errors = Vec::new();
        let mut column = Vec::with_capacity(test.len());
        for (sample, row) in test.iter().zip(&per_sample) {
            match &row[k] {
                Ok(s) => {
                    ok.push(*s);
                    column.push(Some(*s));
                }
                Err(e) => {
                    errors.push(format!("{}: {e}", sample.sample_id));
                    column.push(None);
                }
            }
        }
        if ok.is_empty() {
            return Err(Error::Training {
                epoch: 0,
                step: 0,
                reason: format!("method {} failed on every sample: {}", method.name, errors[0]),
            });
        }
        let pick = |f: fn(&SampleScore) -> f64| mean_std(&ok.iter().map(f).collect::<Vec<_>>());
        let (psnr_mean, psnr_std) = pick(|s| s.psnr);
        let (ssim_mean, ssim_std) = pick(|s| s.ssim);
        let (dice_mean, dice_std) = pick(|s| s.dice);
        records.push(MetricRecord {
            method: method.name.clone(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            dice_mean,
            dice_std,
            n: ok.len(),
            partial: !errors.is_empty(),
            errors,
        });
        scores.push(column);
    }
    Ok(BenchmarkResult {
        records,
        sample_ids: test.iter().map(|s| s.sample_id.clone()).collect(),
        scores,
    })
}
