pub mod autograd;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
