//! Training objective, training loop, checkpoints, inference and evaluation.

mod checkpoint;
mod config;
mod infer;
mod losses;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::denoiser::DenoiserError;
use crate::diffusion::DiffusionError;
use crate::hfpm::HfpmError;
use crate::imaging::ImagingError;
use crate::tensor::TensorError;
use crate::vlg::VlgError;
use crate::wavelet::WaveletError;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use infer::{enhance, evaluate, reflect_pad, MetricsReport, MetricsRow};
pub use losses::{
    content_loss, content_loss_graph, diffusion_loss, ssim_graph, total_loss, total_loss_graph, BoundDenoiser,
    GraphNoisePredictor, LossBreakdown, LossGraph, NoiseQuery, OracleNoise,
};
pub use train::{Trainer, LOSS_LOG_HEADER};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at iteration {iteration}; state written to {}", dump.display())]
    NonFiniteLoss { iteration: usize, dump: PathBuf },
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Hfpm(#[from] HfpmError),
    #[error(transparent)]
    Vlg(#[from] VlgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
