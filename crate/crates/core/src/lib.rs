//! Simplex-space block diffusion language modeling.
//!
//! Tokens live in the vocabulary simplex as almost-one-hot `±K` logit
//! vectors. A small transformer denoiser is trained to recover blocks of
//! tokens from Gaussian-noised logits given a clean left context, and text is
//! generated block by block through iterative denoising. Two diffusion models
//! (or two autoregressive models on the same backbone) can be combined at
//! inference time by interpolating their logits.
//!
//! All numeric code is generic over [`Scalar`] (`f32` and `f64`). Training
//! and decoding normally run in `f32`; gradient checks run in `f64`.

pub mod collab;
pub mod decode;
pub mod error;
pub mod mask;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod simplex;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Token identifier in `[0, V)`.
pub type TokenId = u32;

pub type SimplexLogits32 = simplex::SimplexLogits<f32>;
pub type SimplexLogits64 = simplex::SimplexLogits<f64>;
pub type NoiseSchedule32 = simplex::NoiseSchedule<f32>;
pub type NoiseSchedule64 = simplex::NoiseSchedule<f64>;
pub type DenoiserParams32 = model::DenoiserParams<f32>;
pub type DenoiserParams64 = model::DenoiserParams<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
