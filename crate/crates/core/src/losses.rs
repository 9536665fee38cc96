//! Scalar training objectives and their gradients.
//!
//! The composite objective is `(1 - w) * mse + w * dice_loss`. The same formula
//! serves the task-adaptive loss (weight `alpha`, task network frozen) and the
//! joint-training loss (weight `c`, task network trained alongside); only the
//! wiring in `train` differs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::{Image, SegMap, SegProbs, NUM_CLASSES};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const ALL_CLASSES: [usize; 3] = [0, 1, 2];
pub const FOREGROUND_CLASSES: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub c: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            c: 0.5,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_weight("alpha", self.alpha)?;
        check_weight("c", self.c)?;
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {w}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Slice kernels shared by the public API and the training loops.

/// Mean squared error over equally sized buffers.
pub fn mse<T: Real>(pred: &[T], target: &[T]) -> T {
    let n = T::from_usize(pred.len()).unwrap();
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n
}

/// Gradient of [`mse`] with respect to `pred`, scaled by `scale`.
pub fn mse_grad<T: Real>(pred: &[T], target: &[T], scale: T) -> Vec<T> {
    let k = scale * T::lit(2.0) / T::from_usize(pred.len()).unwrap();
    pred.iter().zip(target).map(|(&p, &t)| k * (p - t)).collect()
}

struct DiceSums<T> {
    intersection: T,
    predicted: T,
    truth: T,
}

fn dice_sums<T: Real>(probs: &[T], labels: &[u8], class: usize) -> DiceSums<T> {
    let n = labels.len();
    let plane = &probs[class * n..(class + 1) * n];
    let mut s = DiceSums {
        intersection: T::zero(),
        predicted: T::zero(),
        truth: T::zero(),
    };
    for (&p, &g) in plane.iter().zip(labels) {
        s.predicted += p;
        if g as usize == class {
            s.intersection += p;
            s.truth += T::one();
        }
    }
    s
}

/// Smoothed soft Dice averaged over `classes`.
///
/// `probs` is channel-major (`NUM_CLASSES x N`), `labels` has length `N`.
pub fn soft_dice<T: Real>(probs: &[T], labels: &[u8], epsilon: T, classes: &[usize]) -> T {
    let two = T::lit(2.0);
    let total = classes
        .iter()
        .map(|&c| {
            let s = dice_sums(probs, labels, c);
            (two * s.intersection + epsilon) / (s.predicted + s.truth + epsilon)
        })
        .sum::<T>();
    total / T::from_usize(classes.len()).unwrap()
}

/// Value of `1 - soft_dice` over all classes and its gradient w.r.t. `probs`,
/// the gradient scaled by `scale`.
pub fn dice_loss_and_grad<T: Real>(
    probs: &[T],
    labels: &[u8],
    epsilon: T,
    scale: T,
) -> (T, Vec<T>) {
    let n = labels.len();
    let two = T::lit(2.0);
    let k = T::from_usize(ALL_CLASSES.len()).unwrap();
    let mut grad = vec![T::zero(); probs.len()];
    let mut score = T::zero();
    for &c in &ALL_CLASSES {
        let s = dice_sums(probs, labels, c);
        let num = two * s.intersection + epsilon;
        let den = s.predicted + s.truth + epsilon;
        score += num / den;
        let den2 = den * den;
        for (i, g) in grad[c * n..(c + 1) * n].iter_mut().enumerate() {
            let gt = if labels[i] as usize == c { T::one() } else { T::zero() };
            // d(loss)/dp = -(1/k) * d(score_c)/dp
            *g = -scale * (two * gt * den - num) / (den2 * k);
        }
    }
    (T::one() - score / k, grad)
}

// ---------------------------------------------------------------------------
// Image-level API.

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_probs(probs: &SegProbs, gt: &SegMap) -> Result<()> {
    let (c, h, w) = probs.dim();
    if c != NUM_CLASSES || (h, w) != gt.dim() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} do not match labels {:?}",
            probs.dim(),
            gt.dim()
        )));
    }
    if let Some(bad) = gt.iter().find(|&&g| g as usize >= NUM_CLASSES) {
        return Err(Error::Usage(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

fn flat<T: Clone, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> std::borrow::Cow<'_, [T]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().cloned().collect()),
    }
}

pub fn mse_loss(prediction: &Image, target: &Image) -> Result<f64> {
    same_shape(prediction, target)?;
    Ok(mse(&flat(prediction), &flat(target)))
}

pub fn dice_score(probs: &SegProbs, gt: &SegMap, epsilon: f64, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Usage("dice needs at least one class".into()));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(Error::Usage(format!("class {c} outside 0..{NUM_CLASSES}")));
    }
    check_probs(probs, gt)?;
    Ok(soft_dice(&flat(probs), &flat(gt), epsilon, classes))
}

pub fn dice_loss(probs: &SegProbs, gt: &SegMap, epsilon: f64) -> Result<f64> {
    Ok(1.0 - dice_score(probs, gt, epsilon, &ALL_CLASSES)?)
}

fn composite(
    recon: &Image,
    full: &Image,
    probs: &SegProbs,
    gt: &SegMap,
    weight: f64,
    name: &str,
) -> Result<f64> {
    check_weight(name, weight)?;
    let m = mse_loss(recon, full)?;
    let d = dice_loss(probs, gt, DEFAULT_EPSILON)?;
    Ok((1.0 - weight) * m + weight * d)
}

/// `(1 - alpha) * mse(recon, full) + alpha * dice_loss(probs, gt)`, where
/// `probs` come from the frozen pretrained segmentation network.
pub fn task_adaptive_loss(
    recon: &Image,
    full: &Image,
    probs: &SegProbs,
    gt: &SegMap,
    alpha: f64,
) -> Result<f64> {
    composite(recon, full, probs, gt, alpha, "alpha")
}

/// `(1 - c) * mse(recon, full) + c * dice_loss(probs, gt)`, where `probs`
/// come from the jointly trained segmentation network.
pub fn joint_loss(
    recon: &Image,
    full: &Image,
    probs: &SegProbs,
    gt: &SegMap,
    c: f64,
) -> Result<f64> {
    composite(recon, full, probs, gt, c, "c")
}
