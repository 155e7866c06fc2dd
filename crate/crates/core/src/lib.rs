//! `difpath`: a desk-scale toolkit for diffusion generative models on
//! pathology-like patch data.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, the precision used
//! throughout the pipeline and the command-line tool.

pub mod denoiser;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod samplers;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
pub type NoiseSchedule32 = schedule::NoiseSchedule<f32>;
pub type ConvDenoiser = denoiser::ConvDenoiser<f64>;
pub type ConvDenoiser32 = denoiser::ConvDenoiser<f32>;
pub type AnalyticGmmDenoiser = denoiser::AnalyticGmmDenoiser<f64>;
pub type GaussianMixture = denoiser::GaussianMixture<f64>;
pub type ParamSet = nn::ParamSet<f64>;
pub type AdamState = nn::AdamState<f64>;
pub type Autoencoder = latent::Autoencoder<f64>;
pub type Autoencoder32 = latent::Autoencoder<f32>;
