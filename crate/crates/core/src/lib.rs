//! Task-adaptive low-dose CT reconstruction.
//!
//! A reconstruction network is trained against a convex combination of a
//! pixel loss and a segmentation loss evaluated through a frozen, pretrained
//! segmentation network. The crate covers the whole experiment: parallel-beam
//! simulation of low-dose scans, phantom datasets, U-Net models, the training
//! procedures, and ROI-masked evaluation.

pub mod config;
pub mod ctsim;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod pipeline;
pub mod rawio;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

use ndarray::{Array2, Array3};

/// H x W attenuation slice, nominally in the unit interval.
pub type Image = Array2<f64>;
/// Per-pixel class labels: 0 background, 1 liver, 2 tumor.
pub type SegMap = Array2<u8>;
/// `classes x H x W` probabilities summing to one per pixel.
pub type SegProbs = Array3<f64>;
pub type Mask = Array2<bool>;

pub const NUM_CLASSES: usize = 3;
