//! Diffusion-model synthetic data generation, small convolutional
//! classifiers trained on the synthetic data, hold-out evaluation and
//! local surrogate explanations.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the concrete instantiations used by the
//! pipeline (`f32`) and by verification runs (`f64`).

pub mod classifier;
pub mod datakit;
pub mod ddpm;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod lime;
pub mod numeric;
pub mod rng;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numeric::Tensor<f32>;
pub type Tensor64 = numeric::Tensor<f64>;
pub type Tape32 = numeric::Tape<f32>;
pub type Tape64 = numeric::Tape<f64>;
pub type Denoiser32 = denoiser::DenoiserModel<f32>;
pub type Denoiser64 = denoiser::DenoiserModel<f64>;
pub type Classifier32 = classifier::Classifier<f32>;
pub type Classifier64 = classifier::Classifier<f64>;
