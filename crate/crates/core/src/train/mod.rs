//! Training procedures: segmentation pretraining, task-adaptive
//! reconstruction training against a frozen segmentation network, and the
//! joint-training baseline, all driven by one shared loop.

mod optim;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::dataset::derive_seed;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::losses::{check_weight, dice_loss_and_grad, mse, mse_grad, DEFAULT_EPSILON};
use crate::nets::checkpoint::hex;
use crate::nets::{build_model, image_to_tensor, save_checkpoint, CheckpointMeta, Head, ModelHandle, Tensor, UNetConfig};
use crate::real::Real;

pub use optim::{Adam, EarlyStopper, PlateauScheduler, SchedulerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler: SchedulerConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Fraction of the training split held out for validation.
    pub validation_fraction: f64,
    pub epsilon: f64,
    /// Joint training only: start the task network from the pretrained
    /// weights instead of a fresh initialisation.
    pub joint_init_from_pretrained: bool,
    /// Where the last good parameters are written if training diverges.
    #[serde(skip)]
    pub recovery_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            scheduler: SchedulerConfig::PlateauDecay {
                factor: 0.5,
                patience: 3,
            },
            early_stop_patience: 6,
            seed: 0,
            validation_fraction: 0.1,
            epsilon: DEFAULT_EPSILON,
            joint_init_from_pretrained: false,
            recovery_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "max_epochs, batch_size and early_stop_patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        self.scheduler.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub procedure: String,
    /// `alpha` or `c` where the procedure has one.
    pub weight: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub step_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
    pub loss_curve_digest: String,
    /// Filled in by callers that persist the trained models.
    pub checkpoints: Vec<String>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            training_step: self.step_loss.len() as u64,
            loss_curve_digest: self.loss_curve_digest.clone(),
        }
    }
}

/// Hex SHA-256 over the little-endian bytes of a loss curve.
pub fn curve_digest(curve: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in curve {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

/// A dataset sample converted to network tensors.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub id: String,
    pub low: Tensor<T>,
    pub full: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Real> TrainSample<T> {
    pub fn from_pair(pair: &SamplePair) -> Self {
        Self {
            id: pair.sample_id.clone(),
            low: image_to_tensor(&pair.low_dose),
            full: image_to_tensor(&pair.full_dose),
            labels: pair.seg.iter().copied().collect(),
        }
    }
}

pub fn prepare<T: Real>(pairs: &[SamplePair]) -> Vec<TrainSample<T>> {
    pairs.iter().map(TrainSample::from_pair).collect()
}

/// A per-sample loss over one or more trainable models.
pub trait Objective<T: Real> {
    fn num_models(&self) -> usize;
    /// Whether model `index` receives optimizer updates.
    fn updates(&self, index: usize) -> bool;
    /// Loss on one sample. With `grads`, accumulates `scale` times the
    /// parameter gradient of every updated model into its buffer.
    fn sample_loss(
        &self,
        models: &[ModelHandle<T>],
        sample: &TrainSample<T>,
        grads: Option<&mut [Vec<T>]>,
        scale: T,
    ) -> Result<f64>;
}

/// Dice loss of the segmentation network on full-dose inputs.
pub struct SegmentationObjective {
    pub epsilon: f64,
}

impl<T: Real> Objective<T> for SegmentationObjective {
    fn num_models(&self) -> usize {
        1
    }

    fn updates(&self, _: usize) -> bool {
        true
    }

    fn sample_loss(
        &self,
        models: &[ModelHandle<T>],
        sample: &TrainSample<T>,
        grads: Option<&mut [Vec<T>]>,
        scale: T,
    ) -> Result<f64> {
        let seg = &models[0];
        let tape = seg.forward(&sample.full)?;
        let out = tape.output();
        let (loss, g) = dice_loss_and_grad(&out.data, &sample.labels, T::lit(self.epsilon), scale);
        let (c, h, w) = (out.channels, out.height, out.width);
        if let Some(grads) = grads {
            seg.backward(tape, &Tensor::from_vec(c, h, w, g), Some(&mut grads[0]), false);
        }
        Ok(loss.as_f64())
    }
}

/// `(1 - w) * mse + w * dice_loss` through an optional segmentation network.
///
/// Returns the loss; when `recon_grads` is set, back-propagates into the
/// reconstruction network and (if `seg_grads` is set) into the segmentation
/// network. A zero weight skips the segmentation branch entirely.
#[allow(clippy::too_many_arguments)]
fn composite_sample<T: Real>(
    recon: &ModelHandle<T>,
    seg: Option<&ModelHandle<T>>,
    weight: f64,
    epsilon: f64,
    sample: &TrainSample<T>,
    recon_grads: Option<&mut [T]>,
    seg_grads: Option<&mut [T]>,
    scale: T,
) -> Result<f64> {
    let tape = recon.forward(&sample.low)?;
    let r = tape.output();
    let (h, w) = (r.height, r.width);
    let m = mse(&r.data, &sample.full.data);
    if weight == 0.0 {
        if let Some(g) = recon_grads {
            let d = mse_grad(&r.data, &sample.full.data, scale);
            recon.backward(tape, &Tensor::from_vec(1, h, w, d), Some(g), false);
        }
        return Ok(m.as_f64());
    }
    let seg = seg.ok_or_else(|| Error::Usage("a task weight above zero needs a segmentation model".into()))?;
    let wt = T::lit(weight);
    let seg_tape = seg.forward(r)?;
    let p = seg_tape.output();
    let (dl, dp) = dice_loss_and_grad(&p.data, &sample.labels, T::lit(epsilon), wt * scale);
    let loss = (T::one() - wt) * m + wt * dl;
    if let Some(g) = recon_grads {
        let dp = Tensor::from_vec(p.channels, h, w, dp);
        let dr_task = seg
            .backward(seg_tape, &dp, seg_grads, true)
            .expect("input gradient requested");
        let mut dr = Tensor::from_vec(1, h, w, mse_grad(&r.data, &sample.full.data, (T::one() - wt) * scale));
        dr.add_assign(&dr_task);
        recon.backward(tape, &dr, Some(g), false);
    }
    Ok(loss.as_f64())
}

/// Task-adaptive objective: the segmentation network is a fixed part of the
/// loss and never trained.
pub struct TaskAdaptiveObjective<'a, T> {
    pub task: Option<&'a ModelHandle<T>>,
    pub alpha: f64,
    pub epsilon: f64,
}

impl<T: Real> Objective<T> for TaskAdaptiveObjective<'_, T> {
    fn num_models(&self) -> usize {
        1
    }

    fn updates(&self, _: usize) -> bool {
        true
    }

    fn sample_loss(
        &self,
        models: &[ModelHandle<T>],
        sample: &TrainSample<T>,
        grads: Option<&mut [Vec<T>]>,
        scale: T,
    ) -> Result<f64> {
        let g = grads.map(|g| g[0].as_mut_slice());
        composite_sample(&models[0], self.task, self.alpha, self.epsilon, sample, g, None, scale)
    }
}

/// Joint objective over `[reconstruction, segmentation]`; both are trained
/// unless the weight is zero.
pub struct JointObjective {
    pub c: f64,
    pub epsilon: f64,
}

impl<T: Real> Objective<T> for JointObjective {
    fn num_models(&self) -> usize {
        2
    }

    fn updates(&self, index: usize) -> bool {
        index == 0 || self.c > 0.0
    }

    fn sample_loss(
        &self,
        models: &[ModelHandle<T>],
        sample: &TrainSample<T>,
        grads: Option<&mut [Vec<T>]>,
        scale: T,
    ) -> Result<f64> {
        match grads {
            Some(grads) => {
                let (r, s) = grads.split_at_mut(1);
                composite_sample(
                    &models[0],
                    Some(&models[1]),
                    self.c,
                    self.epsilon,
                    sample,
                    Some(&mut r[0]),
                    Some(&mut s[0]),
                    scale,
                )
            }
            None => composite_sample(&models[0], Some(&models[1]), self.c, self.epsilon, sample, None, None, scale),
        }
    }
}

/// One optimizer step on the mean loss of `batch`. Returns that mean.
pub fn train_step<T: Real, O: Objective<T> + ?Sized>(
    models: &mut [ModelHandle<T>],
    optimizers: &mut [Adam<T>],
    objective: &O,
    batch: &[&TrainSample<T>],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut grads: Vec<Vec<T>> = models.iter().map(|m| vec![T::zero(); m.num_params()]).collect();
    let scale = T::one() / T::from_usize(batch.len()).unwrap();
    let mut total = 0.0;
    for s in batch {
        total += objective.sample_loss(models, s, Some(&mut grads), scale)?;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Training {
            epoch: 0,
            step: optimizers.first().map_or(0, |o| o.steps() as usize),
            reason: format!("non-finite loss or gradient (loss = {loss})"),
        });
    }
    for (i, (model, opt)) in models.iter_mut().zip(optimizers.iter_mut()).enumerate() {
        if objective.updates(i) {
            opt.step(model.params_mut()?, &grads[i], lr);
        }
    }
    Ok(loss)
}

/// Mean loss over `samples` without updating anything.
pub fn mean_loss<T: Real, O: Objective<T> + ?Sized>(
    models: &[ModelHandle<T>],
    objective: &O,
    samples: &[&TrainSample<T>],
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += objective.sample_loss(models, s, None, T::one())?;
    }
    Ok(total / samples.len() as f64)
}

/// Seeded partition of `n` training indices into (fit, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 training samples, found {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "validation", "")));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    let mut fit = idx;
    fit.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    Ok((fit, val))
}

fn save_recovery<T: Real>(dir: &PathBuf, models: &[ModelHandle<T>], params: &[Vec<T>]) -> String {
    let mut written = Vec::new();
    for (i, (m, p)) in models.iter().zip(params).enumerate() {
        let mut m = m.clone().unfreeze();
        if let Ok(dst) = m.params_mut() {
            dst.copy_from_slice(p);
        }
        let path = dir.join(format!("last_good_{i}.ckpt"));
        if save_checkpoint(&m, &CheckpointMeta::default(), &path).is_ok() {
            written.push(path.display().to_string());
        }
    }
    written.join(", ")
}

fn diverged<T: Real>(
    config: &TrainConfig,
    models: &[ModelHandle<T>],
    best: &[Vec<T>],
    epoch: usize,
    step: usize,
    reason: String,
) -> Error {
    let saved = match &config.recovery_dir {
        Some(dir) => format!("; last good parameters in {}", save_recovery(dir, models, best)),
        None => String::new(),
    };
    Error::Training {
        epoch,
        step,
        reason: format!("{reason}{saved}"),
    }
}

/// Shared optimisation loop: seeded shuffling, held-out validation, plateau
/// decay, early stopping, and restoration of the best-validation parameters.
pub fn fit_loop<T: Real, O: Objective<T> + ?Sized>(
    mut models: Vec<ModelHandle<T>>,
    objective: &O,
    train: &[TrainSample<T>],
    config: &TrainConfig,
    procedure: &str,
    weight: Option<f64>,
) -> Result<(Vec<ModelHandle<T>>, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if models.len() != objective.num_models() {
        return Err(Error::Usage(format!(
            "objective expects {} models, got {}",
            objective.num_models(),
            models.len()
        )));
    }
    let started = Instant::now();
    let (fit_idx, val_idx) = validation_split(train.len(), config.validation_fraction, config.seed)?;
    let val: Vec<&TrainSample<T>> = val_idx.iter().map(|&i| &train[i]).collect();
    let mut order = fit_idx;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle", ""));
    let mut optimizers: Vec<Adam<T>> = models.iter().map(|m| Adam::new(m.num_params())).collect();
    let mut scheduler = PlateauScheduler::new(config.scheduler, config.learning_rate);
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best: Vec<Vec<T>> = models.iter().map(|m| m.params().to_vec()).collect();
    let mut report = TrainReport {
        procedure: procedure.to_string(),
        weight,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        learning_rate: Vec::new(),
        step_loss: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        epochs_run: 0,
        stopped_early: false,
        wall_clock_secs: 0.0,
        loss_curve_digest: String::new(),
        checkpoints: Vec::new(),
        config: config.clone(),
    };

    for epoch in 0..config.max_epochs {
        let lr = scheduler.lr();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainSample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = match train_step(&mut models, &mut optimizers, objective, &batch, lr) {
                Ok(l) => l,
                Err(Error::Training { reason, .. }) => {
                    return Err(diverged(config, &models, &best, epoch, step, reason));
                }
                Err(e) => return Err(e),
            };
            report.step_loss.push(loss);
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = mean_loss(&models, objective, &val)?;
        if !val_loss.is_finite() {
            let reason = format!("non-finite validation loss {val_loss}");
            return Err(diverged(config, &models, &best, epoch, report.step_loss.len(), reason));
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.learning_rate.push(lr);
        report.epochs_run = epoch + 1;
        log::info!("{procedure}: epoch {epoch} train {train_loss:.6} val {val_loss:.6} lr {lr:.2e}");
        if stopper.is_improvement(val_loss) {
            for (b, m) in best.iter_mut().zip(&models) {
                b.copy_from_slice(m.params());
            }
        }
        let stop = stopper.observe(epoch, val_loss);
        scheduler.observe(val_loss);
        if stop {
            report.stopped_early = true;
            break;
        }
    }

    for (m, b) in models.iter_mut().zip(&best) {
        m.params_mut()?.copy_from_slice(b);
    }
    report.best_epoch = stopper.best_epoch().unwrap_or(0);
    report.best_val_loss = stopper.best();
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    report.loss_curve_digest = curve_digest(&report.step_loss);
    Ok((models, report))
}

fn init_seed(seed: u64, role: &str) -> u64 {
    derive_seed(seed, "init", role)
}

fn require_head(config: &UNetConfig, head: Head, what: &str) -> Result<()> {
    config.validate()?;
    if config.head != head {
        return Err(Error::Usage(format!("{what} needs a {head:?} head, config has {:?}", config.head)));
    }
    Ok(())
}

/// Pretrains the segmentation network on full-dose images with the Dice
/// loss. The returned model holds the best-validation weights.
pub fn pretrain_segmentation<T: Real>(
    train: &[TrainSample<T>],
    net: &UNetConfig,
    config: &TrainConfig,
) -> Result<(ModelHandle<T>, TrainReport)> {
    require_head(net, Head::ClassProbs, "segmentation pretraining")?;
    let model = build_model::<T>(net.clone(), init_seed(config.seed, "segmentation"))?;
    let objective = SegmentationObjective {
        epsilon: config.epsilon,
    };
    let (mut models, report) = fit_loop(vec![model], &objective, train, config, "pretrain_segmentation", None)?;
    Ok((models.remove(0), report))
}

/// Trains a reconstruction network on `(1 - alpha) * mse + alpha * dice`,
/// with the Dice term taken through the frozen `task` network.
pub fn train_task_adaptive<T: Real>(
    train: &[TrainSample<T>],
    task: &ModelHandle<T>,
    alpha: f64,
    net: &UNetConfig,
    config: &TrainConfig,
) -> Result<(ModelHandle<T>, TrainReport)> {
    check_weight("alpha", alpha)?;
    if !task.is_frozen() {
        return Err(Error::Usage("task-adaptive training needs a frozen task model".into()));
    }
    if task.config().head != Head::ClassProbs {
        return Err(Error::Usage("the task model must have a class-probability head".into()));
    }
    run_reconstruction(train, Some(task), alpha, net, config, "task_adaptive")
}

/// MSE-only reconstruction training: the task-adaptive procedure at zero
/// weight, without needing a task model.
pub fn train_base<T: Real>(
    train: &[TrainSample<T>],
    net: &UNetConfig,
    config: &TrainConfig,
) -> Result<(ModelHandle<T>, TrainReport)> {
    run_reconstruction(train, None, 0.0, net, config, "task_adaptive")
}

fn run_reconstruction<T: Real>(
    train: &[TrainSample<T>],
    task: Option<&ModelHandle<T>>,
    alpha: f64,
    net: &UNetConfig,
    config: &TrainConfig,
    name: &str,
) -> Result<(ModelHandle<T>, TrainReport)> {
    require_head(net, Head::UnitSquash, "reconstruction training")?;
    let model = build_model::<T>(net.clone(), init_seed(config.seed, "reconstruction"))?;
    let objective = TaskAdaptiveObjective {
        task,
        alpha,
        epsilon: config.epsilon,
    };
    let (mut models, report) = fit_loop(vec![model], &objective, train, config, name, Some(alpha))?;
    Ok((models.remove(0), report))
}

/// Trains reconstruction and segmentation networks together on
/// `(1 - c) * mse + c * dice`. Returns `(reconstruction, segmentation)`.
pub fn train_joint<T: Real>(
    train: &[TrainSample<T>],
    c: f64,
    recon_net: &UNetConfig,
    seg_net: &UNetConfig,
    pretrained: Option<&ModelHandle<T>>,
    config: &TrainConfig,
) -> Result<(ModelHandle<T>, ModelHandle<T>, TrainReport)> {
    check_weight("c", c)?;
    require_head(recon_net, Head::UnitSquash, "joint training")?;
    require_head(seg_net, Head::ClassProbs, "joint training")?;
    let recon = build_model::<T>(recon_net.clone(), init_seed(config.seed, "reconstruction"))?;
    let seg = if config.joint_init_from_pretrained {
        let p = pretrained.ok_or_else(|| {
            Error::Usage("joint_init_from_pretrained is set but no pretrained model was given".into())
        })?;
        if p.config() != seg_net {
            return Err(Error::Config("pretrained model does not match the segmentation config".into()));
        }
        p.clone().unfreeze()
    } else {
        build_model::<T>(seg_net.clone(), init_seed(config.seed, "segmentation"))?
    };
    let objective = JointObjective {
        c,
        epsilon: config.epsilon,
    };
    let (mut models, report) = fit_loop(vec![recon, seg], &objective, train, config, "joint", Some(c))?;
    let seg = models.pop().expect("two models");
    let recon = models.pop().expect("two models");
    Ok((recon, seg, report))
}
