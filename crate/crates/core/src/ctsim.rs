//! Parallel-beam tomography: forward projection, filtered back-projection,
//! Poisson low-dose simulation and the circular field-of-view mask.
//!
//! Coordinates: the rotation centre sits at `((H-1)/2, (H-1)/2)` in pixel
//! units, `x` runs along columns and `y` along rows. Detector bins have unit
//! (pixel) spacing and are centred on the rotation axis; angles are uniform
//! over `[0, pi)`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawio;
use crate::{Image, Mask};

/// Attenuation coefficient of the densest tissue (per metre) times the width
/// of the reconstruction domain (metres): converts line integrals measured in
/// image widths of unit-valued tissue into optical depth.
pub const DEFAULT_ATTENUATION_SCALE: f64 = 81.35 * 0.26;
pub const DEFAULT_PHOTON_COUNT: f64 = 4096.0;
/// Counts are clipped from below before the log transform.
pub const MIN_COUNT: f64 = 0.1;

/// Samples per pixel along each ray.
const RAY_OVERSAMPLING: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub num_angles: usize,
    pub num_detectors: usize,
    pub image_size: usize,
}

impl Geometry {
    pub fn new(num_angles: usize, num_detectors: usize, image_size: usize) -> Result<Self> {
        let g = Self {
            num_angles,
            num_detectors,
            image_size,
        };
        g.validate()?;
        Ok(g)
    }

    /// Smallest detector count covering the image diagonal.
    pub fn min_detectors(image_size: usize) -> usize {
        (image_size as f64 * std::f64::consts::SQRT_2 - 1e-9).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_angles == 0 || self.image_size == 0 {
            return Err(Error::Config("geometry sizes must be positive".into()));
        }
        let need = Self::min_detectors(self.image_size);
        if self.num_detectors < need {
            return Err(Error::Config(format!(
                "{} detectors cannot cover a {}-pixel image (need >= {need})",
                self.num_detectors, self.image_size
            )));
        }
        Ok(())
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.num_angles)
            .map(|a| a as f64 * PI / self.num_angles as f64)
            .collect()
    }

    fn detector_center(&self) -> f64 {
        (self.num_detectors as f64 - 1.0) / 2.0
    }

    fn image_center(&self) -> f64 {
        (self.image_size as f64 - 1.0) / 2.0
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            num_angles: 180,
            num_detectors: 185,
            image_size: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Mean incident photons per detector bin.
    pub photon_count: f64,
    pub attenuation_scale: f64,
    pub rng_seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            photon_count: DEFAULT_PHOTON_COUNT,
            attenuation_scale: DEFAULT_ATTENUATION_SCALE,
            rng_seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.photon_count > 0.0) || !self.photon_count.is_finite() {
            return Err(Error::Config(format!(
                "photon_count must be positive, got {}",
                self.photon_count
            )));
        }
        if !(self.attenuation_scale > 0.0) {
            return Err(Error::Config("attenuation_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Filter {
    Ramp,
    HannRamp,
}

impl std::str::FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Filter::Ramp),
            "hann-ramp" => Ok(Filter::HannRamp),
            other => Err(Error::Config(format!("unknown filter '{other}'"))),
        }
    }
}

/// `angles x detectors` line integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub values: Array2<f64>,
    pub geometry: Geometry,
}

#[derive(Debug, Serialize, Deserialize)]
struct SinogramSidecar {
    geometry: Geometry,
    noise: Option<NoiseModel>,
}

impl Sinogram {
    pub fn new(values: Array2<f64>, geometry: Geometry) -> Result<Self> {
        if values.dim() != (geometry.num_angles, geometry.num_detectors) {
            return Err(Error::Dimension(format!(
                "sinogram {:?} does not match geometry {}x{}",
                values.dim(),
                geometry.num_angles,
                geometry.num_detectors
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("sinogram contains non-finite values".into()));
        }
        Ok(Self { values, geometry })
    }

    /// Raw little-endian `f32` array plus a JSON sidecar (`<path>.json`).
    pub fn save(&self, path: &Path, noise: Option<&NoiseModel>) -> Result<()> {
        let sidecar = SinogramSidecar {
            geometry: self.geometry,
            noise: noise.copied(),
        };
        rawio::write_f32(path, &self.values, serde_json::to_value(sidecar)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (values, extra) = rawio::read_f32(path)?;
        let sidecar: SinogramSidecar = serde_json::from_value(extra)?;
        Sinogram::new(values, sidecar.geometry)
    }
}

fn check_image(image: &Image, geometry: &Geometry) -> Result<()> {
    geometry.validate()?;
    let n = geometry.image_size;
    if image.dim() != (n, n) {
        return Err(Error::Dimension(format!(
            "image {:?} does not match geometry size {n}",
            image.dim()
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("image contains non-finite values".into()));
    }
    Ok(())
}

#[inline]
fn bilinear(image: &Image, y: f64, x: f64) -> f64 {
    let (h, w) = image.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            image[[r as usize, c as usize]]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
}

/// Line integrals of `image` in pixel-length units.
pub fn radon(image: &Image, geometry: &Geometry) -> Result<Sinogram> {
    check_image(image, geometry)?;
    let c = geometry.image_center();
    let dc = geometry.detector_center();
    let half = geometry.num_detectors as f64 / 2.0;
    let steps = (2.0 * half * RAY_OVERSAMPLING).ceil() as usize;
    let ds = 2.0 * half / steps as f64;
    let mut values = Array2::zeros((geometry.num_angles, geometry.num_detectors));
    for (a, theta) in geometry.angles().into_iter().enumerate() {
        let (sin, cos) = theta.sin_cos();
        for d in 0..geometry.num_detectors {
            let t = d as f64 - dc;
            let mut acc = 0.0;
            for k in 0..steps {
                // Midpoint rule along the ray direction (-sin, cos).
                let s = -half + (k as f64 + 0.5) * ds;
                let x = t * cos - s * sin;
                let y = t * sin + s * cos;
                acc += bilinear(image, c + y, c + x);
            }
            values[[a, d]] = acc * ds;
        }
    }
    Sinogram::new(values, *geometry)
}

/// Frequency response of the discrete ramp filter (unit detector spacing),
/// optionally apodised by a Hann window.
fn filter_response(len: usize, filter: Filter) -> Vec<f64> {
    // Spatial kernel of the band-limited ramp: h[0] = 1/4, h[n odd] = -1/(pi n)^2.
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 0.25;
    for n in 1..len / 2 {
        if n % 2 == 1 {
            let v = -1.0 / (PI * n as f64).powi(2);
            kernel[n].re = v;
            kernel[len - n].re = v;
        }
    }
    let fft = FftPlanner::new().plan_fft_forward(len);
    fft.process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let freq = k.min(len - k) as f64 / len as f64; // cycles/sample in [0, 0.5]
            let window = match filter {
                Filter::Ramp => 1.0,
                Filter::HannRamp => 0.5 * (1.0 + (2.0 * PI * freq).cos()),
            };
            v.re * window
        })
        .collect()
}

fn filter_projections(sino: &Sinogram, filter: Filter) -> Array2<f64> {
    let d = sino.geometry.num_detectors;
    let len = (2 * d).next_power_of_two();
    let response = filter_response(len, filter);
    let mut planner = FftPlanner::new();
    let fwd: Arc<dyn rustfft::Fft<f64>> = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Array2::zeros(sino.values.dim());
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for (a, row) in sino.values.outer_iter().enumerate() {
        buf.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&response) {
            *b *= r;
        }
        inv.process(&mut buf);
        for k in 0..d {
            out[[a, k]] = buf[k].re / len as f64;
        }
    }
    out
}

/// Unclipped filtered back-projection.
pub fn fbp_raw(sinogram: &Sinogram, filter: Filter) -> Result<Image> {
    let g = sinogram.geometry;
    g.validate()?;
    let filtered = filter_projections(sinogram, filter);
    let n = g.image_size;
    let c = g.image_center();
    let dc = g.detector_center();
    let trig: Vec<(f64, f64)> = g.angles().iter().map(|t| t.sin_cos()).collect();
    let last = g.num_detectors as isize - 1;
    let mut image = Array2::zeros((n, n));
    for i in 0..n {
        let y = i as f64 - c;
        for j in 0..n {
            let x = j as f64 - c;
            let mut acc = 0.0;
            for (a, &(sin, cos)) in trig.iter().enumerate() {
                let pos = x * cos + y * sin + dc;
                let p0 = pos.floor();
                let f = pos - p0;
                let p0 = p0 as isize;
                let at = |k: isize| {
                    if k < 0 || k > last {
                        0.0
                    } else {
                        filtered[[a, k as usize]]
                    }
                };
                acc += (1.0 - f) * at(p0) + f * at(p0 + 1);
            }
            image[[i, j]] = acc * PI / g.num_angles as f64;
        }
    }
    Ok(image)
}

/// Filtered back-projection clipped to the unit interval.
pub fn fbp(sinogram: &Sinogram, filter: Filter) -> Result<Image> {
    let mut image = fbp_raw(sinogram, filter)?;
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(image)
}

/// Poisson-distributed photon counts, clipped below at [`MIN_COUNT`].
pub fn sample_counts(expected: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    expected.mapv(|lambda| {
        let k = if lambda > 0.0 && lambda.is_finite() {
            Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(lambda)
        } else {
            0.0
        };
        k.max(MIN_COUNT)
    })
}

/// Noisy line integrals (pixel-length units) for the given clean sinogram.
pub fn noisy_sinogram(clean: &Sinogram, noise: &NoiseModel) -> Result<Sinogram> {
    noise.validate()?;
    let n = clean.geometry.image_size as f64;
    // Optical depth per pixel-length line integral.
    let mu = noise.attenuation_scale / n;
    let expected = clean.values.mapv(|s| noise.photon_count * (-s * mu).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let counts = sample_counts(&expected, &mut rng);
    let values = counts.mapv(|k| -(k / noise.photon_count).ln() / mu);
    Sinogram::new(values, clean.geometry)
}

/// Low-dose counterpart of a full-dose slice: project, add photon noise, and
/// reconstruct with ramp-filtered back-projection.
pub fn simulate_low_dose(full_dose: &Image, geometry: &Geometry, noise: &NoiseModel) -> Result<Image> {
    noise.validate()?;
    if full_dose.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Usage("full-dose image must lie in [0, 1]".into()));
    }
    let clean = radon(full_dose, geometry)?;
    fbp(&noisy_sinogram(&clean, noise)?, Filter::Ramp)
}

/// Pixels whose centre lies within `radius` of the image centre.
pub fn roi_mask(image_size: usize, radius: usize) -> Result<Mask> {
    if radius > image_size.div_ceil(2) {
        return Err(Error::Usage(format!(
            "ROI radius {radius} exceeds half the image size {image_size}"
        )));
    }
    let c = (image_size as f64 - 1.0) / 2.0;
    let r2 = (radius * radius) as f64;
    Ok(Array2::from_shape_fn((image_size, image_size), |(i, j)| {
        let (dy, dx) = (i as f64 - c, j as f64 - c);
        dy * dy + dx * dx <= r2
    }))
}

/// Default evaluation ROI: radius of half the image size.
pub fn default_roi(image_size: usize) -> Mask {
    roi_mask(image_size, image_size / 2).expect("half-size radius is always valid")
}
