//! Argument parsing and dispatch for the `tact` binary.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for runtime
//! failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tact_core::config::{RunConfig, OUTPUT_ROOT_ENV};
use tact_core::data::{DatasetManifest, Split};
use tact_core::error::{Error, Result};
use tact_core::eval::{render_report, BenchmarkResult, GalleryInput};
use tact_core::pipeline::{self, Float};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Benchmark output of `evaluate`, consumed by `report`.
pub const BENCHMARK_FILE: &str = "benchmark.json";

#[derive(Parser, Debug)]
#[command(name = "tact", version, about = "Task-adaptive low-dose CT reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size defaults.
    Default,
    /// The desk-scale 64x64 experiment.
    Toy,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; missing fields keep the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field by dotted path, e.g. `train.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base configuration the file and overrides apply to.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Output directory; defaults to `$TACT_OUTPUT_ROOT/<subcommand>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Run seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DatasetArg {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a dataset of (low-dose, full-dose, segmentation) triples.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of samples (same as `--set data.count=N`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain the segmentation network on full-dose images.
    PretrainSeg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
    },
    /// Train the reconstruction network with MSE only (alpha = 0).
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        /// Frozen pretrained segmentation checkpoint.
        #[arg(long)]
        task_model: PathBuf,
    },
    /// Train the reconstruction network through the frozen segmentation network.
    TrainTaskAdaptive {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        /// Frozen pretrained segmentation checkpoint.
        #[arg(long)]
        task_model: PathBuf,
        /// Task-loss weight in [0, 1].
        #[arg(long, allow_negative_numbers = true, value_parser = unit_weight)]
        alpha: f64,
    },
    /// Train reconstruction and segmentation networks together.
    TrainJoint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        /// Pretrained segmentation checkpoint, used with
        /// `train.joint_init_from_pretrained=true`.
        #[arg(long)]
        task_model: Option<PathBuf>,
        /// Segmentation-loss weight in [0, 1].
        #[arg(long = "c", allow_negative_numbers = true, value_parser = unit_weight)]
        c: f64,
    },
    /// Score the baselines and the given networks on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        /// Frozen segmentation checkpoint used for the Dice column.
        #[arg(long)]
        task_model: PathBuf,
        /// Reconstruction network row, `LABEL=CHECKPOINT`; repeatable, kept in order.
        #[arg(long = "model", value_name = "LABEL=CHECKPOINT")]
        models: Vec<String>,
    },
    /// Render tables (and optionally a gallery) from an `evaluate` run.
    Report {
        #[command(flatten)]
        common: Common,
        /// `benchmark.json` written by `evaluate`.
        #[arg(long)]
        results: PathBuf,
        /// With `--task-model` and `--model`, also render gallery panels.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Segmentation checkpoint; with `--dataset`, a gallery is rendered.
        #[arg(long)]
        task_model: Option<PathBuf>,
        #[arg(long = "model", value_name = "LABEL=CHECKPOINT")]
        models: Vec<String>,
    },
    /// Run the complete desk-scale experiment end to end.
    ReproToy {
        #[command(flatten)]
        common: Common,
    },
}

/// Loss weights must lie in [0, 1]; checked while parsing so the range
/// message wins over any missing-argument report.
fn unit_weight(raw: &str) -> std::result::Result<f64, String> {
    let w: f64 = raw.parse().map_err(|e| format!("{raw:?} is not a number: {e}"))?;
    if (0.0..=1.0).contains(&w) {
        Ok(w)
    } else {
        Err(format!("{w} is outside the range [0, 1]"))
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::PretrainSeg { .. } => "pretrain-seg",
            Command::TrainBase { .. } => "train-base",
            Command::TrainTaskAdaptive { .. } => "train-task-adaptive",
            Command::TrainJoint { .. } => "train-joint",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
            Command::ReproToy { .. } => "repro-toy",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::PretrainSeg { common, .. }
            | Command::TrainBase { common, .. }
            | Command::TrainTaskAdaptive { common, .. }
            | Command::TrainJoint { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Report { common, .. }
            | Command::ReproToy { common } => common,
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn effective_config(cmd: &Command, extra: &[String]) -> Result<RunConfig> {
    let common = cmd.common();
    let base = match (common.preset, cmd) {
        (_, Command::ReproToy { .. }) | (Preset::Toy, _) => RunConfig::toy(),
        (Preset::Default, _) => RunConfig::default(),
    };
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    RunConfig::load(common.config.as_deref(), base, &overrides)
}

fn out_dir(cmd: &Command) -> Result<PathBuf> {
    if let Some(out) = &cmd.common().out {
        return Ok(out.clone());
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => Ok(Path::new(&root).join(cmd.name())),
        None => Err(Error::Usage(format!("--out is required when {OUTPUT_ROOT_ENV} is unset"))),
    }
}

/// Splits `LABEL=PATH` at the last `=`, so labels such as `Joint training C=0.9` work.
fn parse_model(spec: &str) -> Result<(String, PathBuf)> {
    match spec.rsplit_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), path.into())),
        _ => Err(Error::Usage(format!("--model {spec:?} is not of the form LABEL=CHECKPOINT"))),
    }
}

fn load_models(specs: &[String]) -> Result<Vec<(String, tact_core::nets::ModelHandle<Float>)>> {
    specs
        .iter()
        .map(|s| {
            let (label, path) = parse_model(s)?;
            Ok((label, pipeline::load_task_model(&path)?))
        })
        .collect()
}

fn dispatch(cmd: Command) -> Result<()> {
    let extra = match &cmd {
        Command::Simulate { count: Some(n), .. } => vec![format!("data.count={n}")],
        _ => Vec::new(),
    };
    let config = effective_config(&cmd, &extra)?;
    let out = out_dir(&cmd)?;
    let workers = cmd.common().workers;
    if workers == 0 {
        return Err(Error::Usage("--workers must be at least 1".into()));
    }
    match &cmd {
        Command::Simulate { .. } => {
            let m = pipeline::simulate(&config, &out, workers)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::PretrainSeg { data, .. } => {
            let manifest = DatasetManifest::load(&data.dataset)?;
            let (_, r) = pipeline::pretrain_seg(&config, &manifest, &out)?;
            print_report(pipeline::SEGMENTATION_MODEL, &r);
        }
        Command::TrainBase { data, task_model, .. } => train_adaptive(&config, &data.dataset, task_model, 0.0, &out)?,
        Command::TrainTaskAdaptive {
            data, task_model, alpha, ..
        } => train_adaptive(&config, &data.dataset, task_model, *alpha, &out)?,
        Command::TrainJoint { data, task_model, c, .. } => {
            let manifest = DatasetManifest::load(&data.dataset)?;
            let pretrained = task_model.as_deref().map(pipeline::load_task_model).transpose()?;
            let (_, _, r) = pipeline::train_joint(&config, &manifest, pretrained.as_ref(), *c, &out)?;
            print_report(&pipeline::joint_name(*c), &r);
        }
        Command::Evaluate {
            data,
            task_model,
            models,
            ..
        } => {
            let manifest = DatasetManifest::load(&data.dataset)?;
            let seg = pipeline::load_task_model(task_model)?;
            let methods = pipeline::methods(&config, load_models(models)?);
            let test = pipeline::load_pairs(&manifest, Split::Test)?;
            let result = pipeline::evaluate(&config, &test, &seg, &methods, workers)?;
            tact_core::rawio::write_bytes(&out.join(BENCHMARK_FILE), &serde_json::to_vec_pretty(&result)?)?;
            config.echo(&out)?;
            print!("{}", tact_core::eval::report::tables_text(&result.records));
        }
        Command::Report {
            results,
            dataset,
            task_model,
            models,
            ..
        } => {
            let bytes = std::fs::read(results).map_err(|e| Error::Usage(format!("{}: {e}", results.display())))?;
            let result: BenchmarkResult = serde_json::from_slice(&bytes)?;
            match (dataset, task_model) {
                (Some(dataset), Some(task_model)) => {
                    let manifest = DatasetManifest::load(dataset)?;
                    let seg = pipeline::load_task_model(task_model)?;
                    let methods = pipeline::methods(&config, load_models(models)?);
                    let test = pipeline::load_pairs(&manifest, Split::Test)?;
                    let ids: Vec<String> = test.iter().take(config.eval.gallery).map(|s| s.sample_id.clone()).collect();
                    pipeline::report(&config, &result, &test, &seg, &methods, &ids, &out)?;
                }
                (None, None) => {
                    render_report::<Float>(&result, None::<&GalleryInput<'_, Float>>, &out)?;
                    config.echo(&out)?;
                }
                _ => return Err(Error::Usage("a gallery needs both --dataset and --task-model".into())),
            }
            println!("wrote report to {}", out.display());
        }
        Command::ReproToy { .. } => {
            let outcome = pipeline::repro_toy(&config, &out, workers)?;
            for (name, r) in &outcome.reports {
                print_report(name, r);
            }
            print!("{}", tact_core::eval::report::tables_text(&outcome.result.records));
        }
    }
    Ok(())
}

fn train_adaptive(config: &RunConfig, dataset: &Path, task_model: &Path, alpha: f64, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(dataset)?;
    let task = pipeline::load_task_model(task_model)?;
    let (_, r) = pipeline::train_task_adaptive(config, &manifest, &task, alpha, out)?;
    print_report(&pipeline::task_adaptive_name(alpha), &r);
    Ok(())
}

fn print_report(name: &str, r: &tact_core::train::TrainReport) {
    println!(
        "{name}: {} epochs, best epoch {} with validation loss {:.6}{}",
        r.epochs_run,
        r.best_epoch,
        r.best_val_loss,
        if r.stopped_early { " (stopped early)" } else { "" }
    );
}
