//! Robust blind image watermarking with a dual-decoder trainer.
//!
//! The pipeline embeds a fixed-length bit message into an image with a
//! convolutional encoder and recovers it with a decoder. Robustness against
//! arbitrary (including non-differentiable) distortions comes from training
//! two structurally identical decoders: a teacher fed clean watermarked
//! images and a student fed gradient-blocked distorted images, with their
//! latent features aligned on a hypersphere. Swapping the decoder roles and
//! momentum-averaging the teacher toward the student keep the two decoders'
//! representations consistent.
//!
//! All numeric code is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`). The default pipeline runs in `f32`; `f64` is used
//! where tests need tight gradient tolerances.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod distortions;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod message;
pub mod models;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod training;

pub use config::{RunConfig, StrategyVariant};
pub use error::{Error, Result};
pub use image::ImageBatch;
pub use message::BitMessage;
pub use params::ParameterSet;
pub use scalar::Scalar;

/// Default-precision image batch used by the CLI pipeline.
pub type ImageBatch32 = image::ImageBatch<f32>;
/// Default-precision parameter set.
pub type ParameterSet32 = params::ParameterSet<f32>;
