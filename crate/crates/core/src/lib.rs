//! Stellar flare forecasting: light-curve windows fused with flare-history
//! and flare-statistics prompts, classified by a frozen transformer backbone
//! fine-tuned through LoRA and bottleneck adapters.
//!
//! The numerical modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choice.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flare_context;
pub mod fusion;
pub mod lightcurve;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod peft;
pub mod pipeline;
pub mod plot;
pub mod scalar;
pub mod synth;
pub mod text_encoder;
pub mod trainer;
pub mod windowing;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Encoder64 = peft::Encoder<f64>;
pub type Encoder32 = peft::Encoder<f32>;
