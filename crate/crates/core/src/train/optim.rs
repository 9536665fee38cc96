//! Adam, plateau learning-rate decay and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / (1.0 - self.beta1.powi(self.t)));
        let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(self.t)));
        let eps = T::lit(self.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step * *m / ((*v * c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SchedulerConfig {
    None,
    PlateauDecay { factor: f64, patience: usize },
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if let SchedulerConfig::PlateauDecay { factor, patience } = *self {
            if !(factor > 0.0 && factor < 1.0) {
                return Err(Error::Config(format!("scheduler factor must lie in (0, 1), got {factor}")));
            }
            if patience == 0 {
                return Err(Error::Config("scheduler patience must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after every `patience`
/// consecutive epochs without a new best validation loss.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: f64,
    stalled: usize,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss; returns the learning rate for
    /// the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stalled = 0;
            return self.lr;
        }
        if let SchedulerConfig::PlateauDecay { factor, patience } = self.config {
            self.stalled += 1;
            if self.stalled >= patience {
                self.lr *= factor;
                self.stalled = 0;
            }
        }
        self.lr
    }
}

/// Stops after `patience` consecutive epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stalled: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stalled: 0,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Whether `epoch` improved on the best loss so far.
    pub fn is_improvement(&self, val_loss: f64) -> bool {
        val_loss < self.best
    }

    /// Records `val_loss` for `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stalled = 0;
            false
        } else {
            self.stalled += 1;
            self.stalled >= self.patience
        }
    }
}
