//! Image I/O, paired datasets, patch sampling and full-reference metrics.

mod dataset;
mod io;
mod metrics;

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub use dataset::{patch_window, sample_patch_pair, Dataset, PairedSample};
pub use io::{load_image, save_image};
pub use metrics::{gaussian_window, mse, psnr, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data in {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },
    #[error("failed to write {path}: {reason}")]
    WriteFailure { path: PathBuf, reason: String },
    #[error("image values must lie in [0, 1]")]
    NotImageValued,
    #[error("cannot encode an image with {0} channels (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("image side {0} is below the 11-pixel SSIM window")]
    ImageTooSmall(usize),
    #[error("patch size {size} exceeds image {height}x{width}")]
    PatchTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("patch size {size} is not divisible by {divisor}")]
    PatchIndivisible { size: usize, divisor: usize },
    #[error("dataset at {0} contains no image pairs")]
    EmptyDataset(PathBuf),
    #[error("no counterpart for {name} in {dir}")]
    MissingPair { name: String, dir: PathBuf },
    #[error("pair {name} differs in shape: {low:?} vs {high:?}")]
    PairShape {
        name: String,
        low: (usize, usize, usize),
        high: (usize, usize, usize),
    },
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
