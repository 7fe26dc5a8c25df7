//! Toy conditional diffusion backbone: noise schedule, denoiser with
//! three-stream decoupled cross-attention, deterministic DDIM sampling with
//! classifier-free guidance, and the pixel/autoencoder codecs.

pub mod autoencoder;
pub mod condition;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

pub use autoencoder::{
    pixel_decode, pixel_decode_backward, pixel_decode_smooth, pixel_encode, train_autoencoder,
    Autoencoder, LatentMode, AE_LATENT_CHANNELS,
};
pub use condition::{
    decoupled_attention, decoupled_attention_backward, BundleGrads, ConditionBundle,
};
pub use sampler::{
    cfg_combine, ddim_step, ddim_update, predict_eps_guided, predict_x0, LatentState,
};
pub use schedule::NoiseSchedule;
pub use train::{pretrain_backbone, CondDropStats, PretrainConfig};
pub use unet::{timestep_embedding, BackboneConfig, Denoiser, DenoiserGrads};
