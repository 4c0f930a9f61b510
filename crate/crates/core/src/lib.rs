//! Diffusion-based lifting of 2D keypoint sequences to 3D poses, conditioned
//! on a learnable prompt bank.

pub mod autograd;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
