//! Evaluation protocol: ROI-masked PSNR/SSIM, background-excluded Dice
//! through the frozen segmentation model, benchmarking and reporting.

pub mod benchmark;
pub mod denoise;
pub mod metrics;
pub mod report;

pub use benchmark::{mean_std, run_benchmark, BenchmarkResult, MethodAdapter, MethodKind, MetricRecord, SampleScore};
pub use denoise::{Denoiser, NlMeans, DEFAULT_DENOISER_SIGMA};
pub use metrics::{argmax_labels, dice_eval, hard_dice, psnr_roi, ssim_roi, PSNR_CAP};
pub use report::{render_report, GalleryInput};
