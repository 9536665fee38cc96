//! ROI-masked image quality metrics and hard-label Dice.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::losses::{DEFAULT_EPSILON, FOREGROUND_CLASSES};
use crate::nets::{segment, Head, ModelHandle};
use crate::real::Real;
use crate::{Image, Mask, SegMap, SegProbs};

/// Reported PSNR when the masked error is exactly zero.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(x: &Image, reference: &Image, mask: &Mask) -> Result<()> {
    if x.dim() != reference.dim() || mask.dim() != x.dim() {
        return Err(Error::Dimension(format!(
            "image {:?}, reference {:?} and mask {:?} must share a shape",
            x.dim(),
            reference.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over the masked pixels, capped at [`PSNR_CAP`].
pub fn psnr_roi(x: &Image, reference: &Image, mask: &Mask, data_range: f64) -> Result<f64> {
    check_pair(x, reference, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&a, &b), &m) in x.iter().zip(reference).zip(mask) {
        if m {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Usage("PSNR mask is empty".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted local means at every centre whose window fits inside
/// the image. Output index `(i, j)` is centred on pixel `(i + r, j + r)`.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (vh, vw) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, vw));
    for i in 0..h {
        for j in 0..vw {
            rows[[i, j]] = (0..n).map(|t| k[t] * img[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((vh, vw));
    for i in 0..vh {
        for j in 0..vw {
            out[[i, j]] = (0..n).map(|t| k[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, unit data range) over
/// the window centres that lie in `mask` and whose window fits the image.
pub fn ssim_roi(x: &Image, reference: &Image, mask: &Mask) -> Result<f64> {
    check_pair(x, reference, mask)?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_kernel();
    let mu_x = filter_valid(x, &k);
    let mu_y = filter_valid(reference, &k);
    let xx = filter_valid(&(x * x), &k);
    let yy = filter_valid(&(reference * reference), &k);
    let xy = filter_valid(&(x * reference), &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let off = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((i, j), &mx) in mu_x.indexed_iter() {
        if !mask[[i + off, j + off]] {
            continue;
        }
        let my = mu_y[[i, j]];
        let vx = xx[[i, j]] - mx * mx;
        let vy = yy[[i, j]] - my * my;
        let cov = xy[[i, j]] - mx * my;
        sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Usage("no SSIM window centre lies inside the mask".into()));
    }
    Ok(sum / n as f64)
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_labels(probs: &SegProbs) -> SegMap {
    let (c, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0;
        for k in 1..c {
            if probs[[k, i, j]] > probs[[best, i, j]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Smoothed Dice between hard label maps, averaged over `classes`.
pub fn hard_dice(pred: &SegMap, gt: &SegMap, epsilon: f64, classes: &[usize]) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Dimension(format!("label maps {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    if classes.is_empty() {
        return Err(Error::Usage("dice needs at least one class".into()));
    }
    let mut total = 0.0;
    for &c in classes {
        let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize == c, g as usize == c);
            inter += (p && g) as usize;
            np += p as usize;
            ng += g as usize;
        }
        total += (2.0 * inter as f64 + epsilon) / ((np + ng) as f64 + epsilon);
    }
    Ok(total / classes.len() as f64)
}

/// Background-excluded hard Dice of the frozen segmentation model's
/// prediction on `recon` against `gt_seg`.
pub fn dice_eval<T: Real>(recon: &Image, gt_seg: &SegMap, seg_model: &ModelHandle<T>) -> Result<f64> {
    Ok(dice_eval_with_labels(recon, gt_seg, seg_model)?.0)
}

/// [`dice_eval`] together with the predicted label map.
pub fn dice_eval_with_labels<T: Real>(
    recon: &Image,
    gt_seg: &SegMap,
    seg_model: &ModelHandle<T>,
) -> Result<(f64, SegMap)> {
    if !seg_model.is_frozen() || seg_model.config().head != Head::ClassProbs {
        return Err(Error::Usage(
            "dice evaluation needs the frozen pretrained segmentation model".into(),
        ));
    }
    let labels = argmax_labels(&segment(seg_model, recon)?);
    Ok((hard_dice(&labels, gt_seg, DEFAULT_EPSILON, &FOREGROUND_CLASSES)?, labels))
}
