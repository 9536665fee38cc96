//! Synthetic abdominal slices: an elliptical body, an elliptical liver and a
//! few circular lesions inside the liver.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Image, SegMap};

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub min: f64,
    pub max: f64,
}

impl Band {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Config(format!("{name}: empty interval [{}, {}]", self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Body ellipse semi-axes as fractions of half the image size.
    pub body_extent: [f64; 2],
    /// Liver semi-major axis range in pixels.
    pub liver_major: Band,
    /// Liver semi-minor axis range in pixels.
    pub liver_minor: Band,
    /// Maximum liver-centre displacement from the image centre, pixels.
    pub center_jitter: f64,
    /// Maximum liver rotation away from horizontal, radians.
    pub max_rotation: f64,
    /// Inclusive tumour count range.
    pub tumor_count: [usize; 2],
    pub tumor_radius: Band,
    pub background: Band,
    pub liver: Band,
    pub tumor: Band,
    pub texture_noise_std: f64,
}

impl PhantomSpec {
    /// Defaults laid out at 64 pixels and scaled linearly to `image_size`.
    pub fn for_size(image_size: usize) -> Self {
        let s = image_size as f64 / 64.0;
        Self {
            image_size,
            body_extent: [0.9, 0.75],
            liver_major: Band::new(14.0 * s, 19.0 * s),
            liver_minor: Band::new(10.0 * s, 13.0 * s),
            center_jitter: 3.0 * s,
            max_rotation: PI / 6.0,
            tumor_count: [1, 3],
            tumor_radius: Band::new(1.5 * s, 4.0 * s),
            background: Band::new(0.18, 0.24),
            liver: Band::new(0.40, 0.46),
            tumor: Band::new(0.31, 0.35),
            texture_noise_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("phantom image_size must be at least 8".into()));
        }
        for (name, b) in [
            ("liver_major", &self.liver_major),
            ("liver_minor", &self.liver_minor),
            ("tumor_radius", &self.tumor_radius),
            ("background", &self.background),
            ("liver", &self.liver),
            ("tumor", &self.tumor),
        ] {
            b.check(name)?;
        }
        for (name, b) in [("background", &self.background), ("liver", &self.liver), ("tumor", &self.tumor)] {
            if b.min < 0.0 || b.max > 1.0 {
                return Err(Error::Config(format!("{name} band must lie in [0, 1]")));
            }
        }
        let means = [self.background.mean(), self.liver.mean(), self.tumor.mean()];
        if means[0] == means[1] || means[1] == means[2] || means[0] == means[2] {
            return Err(Error::Config("intensity bands must have distinct means".into()));
        }
        if self.tumor_count[0] > self.tumor_count[1] {
            return Err(Error::Config("tumor_count range is empty".into()));
        }
        if self.tumor_radius.min <= 0.0 {
            return Err(Error::Config("tumor radii must be positive".into()));
        }
        if self.tumor_radius.max >= self.liver_minor.min {
            return Err(Error::Config(format!(
                "tumor radius up to {} does not fit a liver with semi-minor axis {}",
                self.tumor_radius.max, self.liver_minor.min
            )));
        }
        if self.liver_minor.max > self.liver_major.min {
            return Err(Error::Config("liver_minor must not exceed liver_major".into()));
        }
        let half = self.image_size as f64 / 2.0;
        let body_minor = half * self.body_extent[0].min(self.body_extent[1]);
        if self.liver_major.max + self.center_jitter >= body_minor {
            return Err(Error::Config("liver does not fit inside the body".into()));
        }
        if self.texture_noise_std < 0.0 {
            return Err(Error::Config("texture_noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn level(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.level(y, x) <= 1.0
    }
}

/// Random slice and its label map. Deterministic in `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Image, SegMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let c = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    let body = Ellipse {
        cy: c,
        cx: c,
        a: half * spec.body_extent[0],
        b: half * spec.body_extent[1],
        cos: 1.0,
        sin: 0.0,
    };
    let rot = rng.random_range(-spec.max_rotation..=spec.max_rotation);
    let jitter = |rng: &mut ChaCha8Rng| {
        if spec.center_jitter > 0.0 {
            rng.random_range(-spec.center_jitter..=spec.center_jitter)
        } else {
            0.0
        }
    };
    let liver = Ellipse {
        cy: c + jitter(&mut rng),
        cx: c + jitter(&mut rng),
        a: spec.liver_major.sample(&mut rng),
        b: spec.liver_minor.sample(&mut rng),
        cos: rot.cos(),
        sin: rot.sin(),
    };
    let count = rng.random_range(spec.tumor_count[0]..=spec.tumor_count[1]);
    let mut tumors = Vec::with_capacity(count);
    for _ in 0..count {
        let r = spec.tumor_radius.sample(&mut rng);
        // Rejection-sample a centre whose whole disk lies inside the liver.
        for _ in 0..1000 {
            let ty = rng.random_range(liver.cy - liver.a..=liver.cy + liver.a);
            let tx = rng.random_range(liver.cx - liver.a..=liver.cx + liver.a);
            let inside = (0..32).all(|k| {
                let t = k as f64 * PI / 16.0;
                liver.contains(ty + (r + 1.5) * t.sin(), tx + (r + 1.5) * t.cos())
            });
            if inside {
                tumors.push((ty, tx, r, spec.tumor.sample(&mut rng)));
                break;
            }
        }
    }
    let bg_level = spec.background.sample(&mut rng);
    let liver_level = spec.liver.sample(&mut rng);
    let texture = Normal::new(0.0, spec.texture_noise_std.max(0.0)).expect("finite std");

    let mut image = Array2::zeros((n, n));
    let mut seg = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let (y, x) = (i as f64, j as f64);
            let tumor = tumors
                .iter()
                .find(|(ty, tx, r, _)| (y - ty).powi(2) + (x - tx).powi(2) <= r * r);
            let (value, label) = if let Some(&(_, _, _, level)) = tumor {
                (level, 2u8)
            } else if liver.contains(y, x) {
                (liver_level, 1)
            } else if body.contains(y, x) {
                (bg_level, 0)
            } else {
                continue;
            };
            let noisy = value + texture.sample(&mut rng);
            image[[i, j]] = noisy.clamp(0.0, 1.0);
            seg[[i, j]] = label;
        }
    }
    Ok((image, seg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let spec = PhantomSpec::for_size(64);
        assert_eq!(generate_phantom(&spec, 3).unwrap(), generate_phantom(&spec, 3).unwrap());
        assert_ne!(generate_phantom(&spec, 3).unwrap().0, generate_phantom(&spec, 4).unwrap().0);
    }

    #[test]
    fn single_tumor_spec_has_all_labels_and_nested_tumors() {
        let spec = PhantomSpec {
            tumor_count: [1, 1],
            ..PhantomSpec::for_size(64)
        };
        for seed in 0..20 {
            let (img, seg) = generate_phantom(&spec, seed).unwrap();
            for label in 0..3u8 {
                assert!(seg.iter().any(|&v| v == label), "seed {seed} lacks label {label}");
            }
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Every tumour pixel has liver or tumour on all four sides: the
            // lesion never touches the background.
            for i in 1..63 {
                for j in 1..63 {
                    if seg[[i, j]] == 2 {
                        for (di, dj) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
                            let v = seg[[(i as isize + di) as usize, (j as isize + dj) as usize]];
                            assert!(v >= 1);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn liver_mean_is_inside_the_band() {
        let spec = PhantomSpec::for_size(64);
        for seed in 0..10 {
            let (img, seg) = generate_phantom(&spec, seed).unwrap();
            let vals: Vec<f64> = img.iter().zip(seg.iter()).filter(|(_, &s)| s == 1).map(|(&v, _)| v).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let tol = spec.texture_noise_std;
            assert!(mean >= spec.liver.min - tol && mean <= spec.liver.max + tol, "{mean}");
        }
    }

    #[test]
    fn oversized_tumors_are_rejected() {
        let spec = PhantomSpec {
            tumor_radius: Band::new(2.0, 12.0),
            ..PhantomSpec::for_size(64)
        };
        assert!(matches!(generate_phantom(&spec, 0), Err(Error::Config(_))));
    }
}
