//! Asymmetric extreme image compression.
//!
//! A shallow learned analysis transform feeds a hyperprior plus four-step
//! quadtree context model; quantized latents are range coded, and the decoder
//! maps them through a synthesis transform, a one-step denoiser and a pixel
//! decoder. Training, teacher→student feature distillation and analysis
//! tooling live alongside the codec.

pub mod analysis;
pub mod codec;
pub mod diffusion;
pub mod distill;
pub mod entropy;
pub mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
