//! Identity-protected portrait generation on a procedural synthetic-face corpus.
//!
//! The crate implements a complete desk-scale stack:
//!
//! * [`synthface`] — procedural generator of identity-labeled face images with
//!   exact background masks.
//! * [`frzoo`] — small face-recognition embedders, cosine identity similarity,
//!   and verification-threshold calibration at a fixed false-acceptance rate.
//! * [`backbone`] — a toy conditional diffusion model: cosine noise schedule,
//!   UNet-style denoiser with three-stream decoupled cross-attention
//!   (text / image-semantic / identity), deterministic DDIM sampling with
//!   classifier-free guidance, and an optional convolutional autoencoder
//!   latent mode.
//! * [`encryptor`] — fuses a semantic encoding of the target face with the
//!   surrogate face-recognition ensemble embedding and projects it into the
//!   identity cross-attention stream.
//! * [`enhancer`] — per-step identity guidance: predicts the clean latent,
//!   decodes it, and shifts the latent along the gradient of identity
//!   similarity to the target.
//! * [`mmic`] — closed-vocabulary tokenizer, attribute-to-text face
//!   description templater, prompt augmentation, and the learned text /
//!   image-semantic condition encoders.
//! * [`pipeline`] — two-stage generation (scene prompt first, augmented
//!   prompt after the stage switch), projector training with everything else
//!   frozen, and seed-derived batch protection.
//! * [`evalkit`] — verification / identification attack-success rates, PSNR,
//!   SSIM, feature-space Fréchet distance, protocol runner, and ablation
//!   sweeps.
//!
//! All numeric code is generic over the scalar type through [`num::Real`]
//! (implemented for `f32` and `f64`); the crate root re-exports `f64` aliases
//! for the common pipeline types.

pub mod backbone;
pub mod container;
pub mod encryptor;
pub mod enhancer;
pub mod error;
pub mod evalkit;
pub mod frzoo;
pub mod imaging;
pub mod mmic;
pub mod nn;
pub mod num;
pub mod pipeline;
pub mod rng;
pub mod synthface;

pub use error::{Error, Result};
pub use num::Real;

/// Default scalar used by the command-line pipeline.
pub type DefaultReal = f64;

/// H×W×C image in `[0, 1]`, default scalar.
pub type Image64 = imaging::Image<f64>;
/// Single-precision image, used by throughput-bound evaluation runs.
pub type Image32 = imaging::Image<f32>;

/// Unit-norm identity embedding, default scalar.
pub type IdentityEmbedding64 = frzoo::IdentityEmbedding<f64>;

/// Diffusion noise schedule, default scalar.
pub type NoiseSchedule64 = backbone::NoiseSchedule<f64>;

/// Conditioning streams for the denoiser, default scalar.
pub type ConditionBundle64 = backbone::ConditionBundle<f64>;

/// Full generation configuration, default scalar.
pub type ProtectionConfig64 = pipeline::ProtectionConfig<f64>;
