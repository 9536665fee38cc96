//! Classical patch-similarity denoising for the benchmark's denoiser slot.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::Image;

/// Noise standard deviation used for the reference denoiser row.
pub const DEFAULT_DENOISER_SIGMA: f64 = 0.075;

pub trait Denoiser: Send + Sync {
    /// Row label in benchmark tables.
    fn name(&self) -> String;
    fn denoise(&self, image: &Image) -> Result<Image>;
}

/// Non-local means: every pixel becomes a weighted mean of the pixels in a
/// search window, weighted by the similarity of the surrounding patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlMeans {
    pub sigma: f64,
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Filtering strength relative to `sigma`.
    pub h_factor: f64,
}

impl NlMeans {
    pub fn new(sigma: f64) -> Self {
        Self {
            sigma,
            patch_radius: 2,
            search_radius: 5,
            h_factor: 0.8,
        }
    }
}

impl Default for NlMeans {
    fn default() -> Self {
        Self::new(DEFAULT_DENOISER_SIGMA)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

impl Denoiser for NlMeans {
    fn name(&self) -> String {
        "denoiser (reference)".to_string()
    }

    fn denoise(&self, image: &Image) -> Result<Image> {
        if !(self.sigma > 0.0) || !(self.h_factor > 0.0) {
            return Err(Error::Config("denoiser sigma and strength must be positive".into()));
        }
        let (h, w) = image.dim();
        let pr = self.patch_radius as isize;
        let sr = self.search_radius as isize;
        let pad = pr + sr;
        let padded = Array2::from_shape_fn((h + 2 * pad as usize, w + 2 * pad as usize), |(i, j)| {
            image[[reflect(i as isize - pad, h), reflect(j as isize - pad, w)]]
        });
        let patch_len = ((2 * pr + 1) * (2 * pr + 1)) as f64;
        let var2 = 2.0 * self.sigma * self.sigma;
        let hh = (self.h_factor * self.sigma).powi(2);
        let mut out = Array2::zeros((h, w));
        for i in 0..h as isize {
            for j in 0..w as isize {
                let (ci, cj) = (i + pad, j + pad);
                let (mut acc, mut wsum) = (0.0, 0.0);
                for di in -sr..=sr {
                    for dj in -sr..=sr {
                        let mut d2 = 0.0;
                        for pi in -pr..=pr {
                            for pj in -pr..=pr {
                                let a = padded[[(ci + pi) as usize, (cj + pj) as usize]];
                                let b = padded[[(ci + di + pi) as usize, (cj + dj + pj) as usize]];
                                d2 += (a - b) * (a - b);
                            }
                        }
                        let d2 = d2 / patch_len;
                        let wt = (-((d2 - var2).max(0.0)) / hh).exp();
                        acc += wt * padded[[(ci + di) as usize, (cj + dj) as usize]];
                        wsum += wt;
                    }
                }
                out[[i as usize, j as usize]] = (acc / wsum).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}
