//! Desk-scale denoising diffusion.
//!
//! - [`schedule`]: log-SNR schedules (cosine, resolution-shifted, interpolated)
//!   and the α/σ, transition, posterior and ELBO-weight algebra built on them.
//! - [`wavelet`]: invertible 5/3 DWT and space-to-depth front ends.
//! - [`tensor`]: a small reverse-mode autodiff engine over dense tensors.
//! - [`uvit`]: the U-ViT denoiser.
//! - [`diffusion`]: forward process, parametrizations and training losses.
//! - [`sampler`]: ancestral DDPM sampling with classifier-free guidance.
//! - [`trainer`]: Adam, EMA, datasets, checkpoints and the training loop.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod uvit;
pub mod verify;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
