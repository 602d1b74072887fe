//! Channel-wise feature denoising for fingerprint presentation attack detection.
//!
//! The crate bundles a small reverse-mode differentiation engine, a toy
//! generator/embedding/classifier network, channel importance scoring with
//! top-k suppression of "noise" channels, a triplet-style attack-type loss,
//! synthetic data, biometric metrics and Grad-CAM.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation used by training and the CLI.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoise;
pub mod error;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Adam = tensor::Adam<f64>;
pub type Model = backbone::Model<f64>;
pub type ChannelDistance = denoise::ChannelDistance<f64>;
