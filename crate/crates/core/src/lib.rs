pub mod autograd;
pub mod denoiser;
pub mod diffusion;
pub mod gradcheck;
pub mod hfpm;
pub mod imaging;
pub mod nn;
pub mod pipeline;
mod records;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod vlg;
pub mod wavelet;

pub use scalar::Scalar;

/// Single-precision aliases used by the command-line tool.
pub type Image = tensor::ImageTensor<f32>;
pub type Pyramid = wavelet::WaveletPyramid<f32>;
pub type Model = pipeline::Checkpoint<f32>;
pub type PairedDataset = imaging::Dataset<f32>;
