//! End-to-end stages shared by the command-line tool: dataset build,
//! pretraining, the three training procedures, benchmarking and reporting.
//!
//! Output directory layout of a full run:
//!
//! ```text
//! dataset/                  manifest.json, samples/
//! models/<name>.ckpt        checkpoints
//! reports/<name>.json       training reports
//! report/                   results.csv, results.json, tables.txt, gallery/
//! effective_config.toml
//! ```

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::ctsim::roi_mask;
use crate::data::{build_dataset, load_split, DatasetManifest, DatasetSpec, SamplePair, Split};
use crate::error::{Error, Result};
use crate::eval::{render_report, run_benchmark, BenchmarkResult, GalleryInput, MethodAdapter, NlMeans};
use crate::nets::{load_checkpoint, save_checkpoint, ModelHandle};
use crate::rawio;
use crate::train::{self, prepare, TrainReport, TrainSample};

/// Training and evaluation precision.
pub type Float = f32;

pub const DATASET_DIR: &str = "dataset";
pub const MODELS_DIR: &str = "models";
pub const REPORTS_DIR: &str = "reports";
pub const REPORT_DIR: &str = "report";
pub const SEGMENTATION_MODEL: &str = "segmentation";

/// File-system friendly rendering of a weight: 0.5 -> "0p5".
fn weight_tag(w: f64) -> String {
    format!("{w}").replace('.', "p")
}

pub fn task_adaptive_name(alpha: f64) -> String {
    format!("task_adaptive_a{}", weight_tag(alpha))
}

pub fn joint_name(c: f64) -> String {
    format!("joint_c{}", weight_tag(c))
}

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join(MODELS_DIR).join(format!("{name}.ckpt"))
}

/// Row label used in result tables.
pub fn method_label(name: &str, weight: f64) -> String {
    match name {
        "base" => "Base U-Net".to_string(),
        "joint" => format!("Joint training C={weight}"),
        _ => format!("Task-adaptive alpha={weight}"),
    }
}

pub fn simulate(config: &RunConfig, out: &Path, workers: usize) -> Result<DatasetManifest> {
    config.validate()?;
    let spec = DatasetSpec {
        source: config.source(),
        count: config.data.count,
        geometry: config.geometry,
        noise: config.noise_model(),
        split_ratio: config.data.split_ratio,
        seed: config.seed,
    };
    let manifest = build_dataset(&spec, out, workers)?;
    config.echo(out)?;
    Ok(manifest)
}

pub fn load_pairs(manifest: &DatasetManifest, which: Split) -> Result<Vec<SamplePair>> {
    load_split(manifest, which, None).collect()
}

fn check_dataset(config: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.image_size() != config.data.image_size {
        return Err(Error::Config(format!(
            "dataset holds {}-pixel images but the config expects {}",
            manifest.image_size(),
            config.data.image_size
        )));
    }
    Ok(())
}

fn write_report(out: &Path, name: &str, report: &mut TrainReport, ckpts: &[PathBuf]) -> Result<()> {
    report.checkpoints = ckpts.iter().map(|p| p.display().to_string()).collect();
    let path = out.join(REPORTS_DIR).join(format!("{name}.json"));
    rawio::write_bytes(&path, &serde_json::to_vec_pretty(report)?)
}

fn recovery(config: &RunConfig, out: &Path, name: &str) -> train::TrainConfig {
    train::TrainConfig {
        recovery_dir: Some(out.join(MODELS_DIR).join(format!("{name}_recovery"))),
        ..config.train_config()
    }
}

/// Pretrains the segmentation network and stores it frozen.
pub fn pretrain_seg(
    config: &RunConfig,
    manifest: &DatasetManifest,
    out: &Path,
) -> Result<(ModelHandle<Float>, TrainReport)> {
    check_dataset(config, manifest)?;
    let train: Vec<TrainSample<Float>> = prepare(&load_pairs(manifest, Split::Train)?);
    pretrain_seg_on(config, &train, out)
}

fn pretrain_seg_on(
    config: &RunConfig,
    train: &[TrainSample<Float>],
    out: &Path,
) -> Result<(ModelHandle<Float>, TrainReport)> {
    let tc = recovery(config, out, SEGMENTATION_MODEL);
    let (model, mut report) = train::pretrain_segmentation(train, &config.seg_net(), &tc)?;
    let model = model.freeze();
    let path = checkpoint_path(out, SEGMENTATION_MODEL);
    save_checkpoint(&model, &report.checkpoint_meta(), &path)?;
    write_report(out, SEGMENTATION_MODEL, &mut report, &[path])?;
    config.echo(out)?;
    Ok((model, report))
}

pub fn load_task_model(path: &Path) -> Result<ModelHandle<Float>> {
    let (model, _) = load_checkpoint::<Float>(path)?;
    Ok(model)
}

/// Task-adaptive training; `alpha = 0` is the Base U-Net.
pub fn train_task_adaptive(
    config: &RunConfig,
    manifest: &DatasetManifest,
    task: &ModelHandle<Float>,
    alpha: f64,
    out: &Path,
) -> Result<(ModelHandle<Float>, TrainReport)> {
    check_dataset(config, manifest)?;
    let train: Vec<TrainSample<Float>> = prepare(&load_pairs(manifest, Split::Train)?);
    train_task_adaptive_on(config, &train, task, alpha, out)
}

fn train_task_adaptive_on(
    config: &RunConfig,
    train: &[TrainSample<Float>],
    task: &ModelHandle<Float>,
    alpha: f64,
    out: &Path,
) -> Result<(ModelHandle<Float>, TrainReport)> {
    let name = task_adaptive_name(alpha);
    let tc = recovery(config, out, &name);
    let (model, mut report) = train::train_task_adaptive(train, task, alpha, &config.recon_net(), &tc)?;
    let path = checkpoint_path(out, &name);
    save_checkpoint(&model, &report.checkpoint_meta(), &path)?;
    write_report(out, &name, &mut report, &[path])?;
    config.echo(out)?;
    Ok((model, report))
}

/// Joint training; returns `(reconstruction, segmentation)`.
pub fn train_joint(
    config: &RunConfig,
    manifest: &DatasetManifest,
    pretrained: Option<&ModelHandle<Float>>,
    c: f64,
    out: &Path,
) -> Result<(ModelHandle<Float>, ModelHandle<Float>, TrainReport)> {
    check_dataset(config, manifest)?;
    let train: Vec<TrainSample<Float>> = prepare(&load_pairs(manifest, Split::Train)?);
    train_joint_on(config, &train, pretrained, c, out)
}

fn train_joint_on(
    config: &RunConfig,
    train: &[TrainSample<Float>],
    pretrained: Option<&ModelHandle<Float>>,
    c: f64,
    out: &Path,
) -> Result<(ModelHandle<Float>, ModelHandle<Float>, TrainReport)> {
    let name = joint_name(c);
    let tc = recovery(config, out, &name);
    let (recon, seg, mut report) =
        train::train_joint(train, c, &config.recon_net(), &config.seg_net(), pretrained, &tc)?;
    let rp = checkpoint_path(out, &format!("{name}_reconstruction"));
    let sp = checkpoint_path(out, &format!("{name}_segmentation"));
    save_checkpoint(&recon, &report.checkpoint_meta(), &rp)?;
    save_checkpoint(&seg, &report.checkpoint_meta(), &sp)?;
    write_report(out, &name, &mut report, &[rp, sp])?;
    config.echo(out)?;
    Ok((recon, seg, report))
}

/// Benchmark rows in table order: Low-dose, FBP, denoiser, then the given
/// networks, then Full-dose.
pub fn methods(config: &RunConfig, networks: Vec<(String, ModelHandle<Float>)>) -> Vec<MethodAdapter<Float>> {
    let mut m = vec![
        MethodAdapter::low_dose(),
        MethodAdapter::fbp(config.geometry, config.eval.fbp_filter),
        MethodAdapter::denoiser(Box::new(NlMeans::new(config.eval.denoiser_sigma))),
    ];
    m.extend(networks.into_iter().map(|(name, model)| MethodAdapter::network(name, model)));
    m.push(MethodAdapter::full_dose());
    m
}

pub fn evaluate(
    config: &RunConfig,
    test: &[SamplePair],
    seg_model: &ModelHandle<Float>,
    methods: &[MethodAdapter<Float>],
    workers: usize,
) -> Result<BenchmarkResult> {
    let mask = roi_mask(config.data.image_size, config.roi_radius())?;
    run_benchmark(methods, test, seg_model, &mask, workers)
}

pub fn report(
    config: &RunConfig,
    result: &BenchmarkResult,
    test: &[SamplePair],
    seg_model: &ModelHandle<Float>,
    methods: &[MethodAdapter<Float>],
    gallery_ids: &[String],
    out: &Path,
) -> Result<()> {
    let mask = roi_mask(config.data.image_size, config.roi_radius())?;
    let gallery = GalleryInput {
        methods,
        samples: test,
        seg_model,
        mask: &mask,
        ids: gallery_ids,
    };
    render_report(result, Some(&gallery), out)?;
    config.echo(out)
}

/// Everything `repro-toy` produced.
#[derive(Debug)]
pub struct ReproOutcome {
    pub result: BenchmarkResult,
    pub reports: Vec<(String, TrainReport)>,
    pub report_dir: PathBuf,
}

/// The complete desk-scale experiment: build the dataset, pretrain the
/// segmentation network, train every task-adaptive and joint model, score
/// every method on the test split and write the report.
pub fn repro_toy(config: &RunConfig, out: &Path, workers: usize) -> Result<ReproOutcome> {
    config.validate()?;
    config.echo(out)?;
    let manifest = simulate(config, &out.join(DATASET_DIR), workers)?;
    let train_pairs = load_pairs(&manifest, Split::Train)?;
    let test = load_pairs(&manifest, Split::Test)?;
    let train: Vec<TrainSample<Float>> = prepare(&train_pairs);
    drop(train_pairs);

    let mut reports = Vec::new();
    let (seg, r) = pretrain_seg_on(config, &train, out)?;
    reports.push((SEGMENTATION_MODEL.to_string(), r));

    let mut base = Vec::new();
    let mut adaptive = Vec::new();
    for &alpha in &config.eval.alphas {
        let (model, r) = train_task_adaptive_on(config, &train, &seg, alpha, out)?;
        reports.push((task_adaptive_name(alpha), r));
        if alpha == 0.0 {
            base.push((method_label("base", 0.0), model));
        } else {
            adaptive.push((method_label("task_adaptive", alpha), model));
        }
    }
    let mut joint = Vec::new();
    for &c in &config.eval.joint_cs {
        let (recon, _, r) = train_joint_on(config, &train, Some(&seg), c, out)?;
        reports.push((joint_name(c), r));
        joint.push((method_label("joint", c), recon));
    }
    drop(train);

    let networks: Vec<(String, ModelHandle<Float>)> = base.into_iter().chain(joint).chain(adaptive).collect();
    let methods = methods(config, networks);
    let result = evaluate(config, &test, &seg, &methods, workers)?;
    let gallery: Vec<String> = test
        .iter()
        .take(config.eval.gallery)
        .map(|s| s.sample_id.clone())
        .collect();
    let report_dir = out.join(REPORT_DIR);
    report(config, &result, &test, &seg, &methods, &gallery, &report_dir)?;
    Ok(ReproOutcome {
        result,
        reports,
        report_dir,
    })
}
