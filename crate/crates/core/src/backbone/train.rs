//! Backbone pretraining: denoising loss over the corpus with text and
//! image-semantic conditioning (no identity stream yet). The text encoder and
//! image head train jointly with the denoiser.
//!
//! Two regularization tricks run per sample: with probability 0.10 the text
//! stream is replaced by the zero matrix (the classifier-free-guidance
//! unconditional branch), and with probability 0.25 half of the background
//! pixels are grayed out before the image is encoded.

use crate::backbone::autoencoder::{pixel_encode, Autoencoder};
use crate::backbone::condition::ConditionBundle;
use crate::backbone::schedule::NoiseSchedule;
use crate::backbone::unet::{BackboneConfig, Denoiser};
use crate::error::{Error, Result};
use crate::frzoo::FrModel;
use crate::mmic::{augment_prompt, describe_face, wrap_scene, Mmic, Prompt, N_T_MAX};
use crate::nn::{Adam, Initializer};
use crate::num::{c, Real};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::synthface::{background_dropout, FaceSample, BACKGROUND_PHRASES};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub text_drop_prob: f64,
    pub bg_drop_prob: f64,
    pub bg_drop_fraction: f64,
    /// Fraction of samples trained with the scene-only prompt instead of the
    /// augmented one, so both stages of the sampler are in-distribution.
    pub plain_prompt_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            batch_size: 16,
            lr: 2e-3,
            text_drop_prob: 0.10,
            bg_drop_prob: 0.25,
            bg_drop_fraction: 0.5,
            plain_prompt_prob: 0.4,
            seed: 0,
        }
    }
}

/// Conditioning-dropout counters over a training run.
#[derive(Debug, Clone, Copy, Default)]
pub struct CondDropStats {
    pub samples: usize,
    pub zero_text: usize,
    pub bg_dropped: usize,
}

/// Training prompt for a sample: subject + scene phrase tied to the
/// background style, optionally augmented with the facial description.
pub fn training_prompt<T: Real>(sample: &FaceSample<T>, mmic: &Mmic<T>, augmented: bool) -> Prompt {
    let subject = if sample.attrs.identity_id % 2 == 0 { "a man" } else { "a woman" };
    let scene = BACKGROUND_PHRASES[(sample.attrs.background_id as usize) % BACKGROUND_PHRASES.len()];
    let base = Prompt::new(&wrap_scene(&format!("{subject}, {scene}")), &mmic.vocab);
    if augmented {
        augment_prompt(&base, &describe_face(&sample.attrs), &mmic.vocab)
    } else {
        base
    }
}

/// Draw `z_t = sqrt(ᾱ_t)·z0 + sqrt(1−ᾱ_t)·ε`.
pub fn noisy_latent<T: Real>(
    z0: &Array3<T>,
    eps: &Array3<T>,
    t: usize,
    schedule: &NoiseSchedule<T>,
) -> Array3<T> {
    let ab = schedule.alpha_bar(t);
    let c0 = ab.sqrt();
    let c1 = (T::one() - ab).sqrt();
    z0.mapv(|v| v * c0) + eps.mapv(|e| e * c1)
}

/// Pretrain the denoiser (and jointly the text encoder and image head) with
/// the denoising objective. Deterministic given the seed. Fails on
/// non-finite loss.
pub fn pretrain_backbone<T: Real>(
    corpus: &[FaceSample<T>],
    schedule: &NoiseSchedule<T>,
    backbone_cfg: &BackboneConfig,
    cfg: &PretrainConfig,
    mmic: &mut Mmic<T>,
    semantic_model: &FrModel<T>,
    autoencoder: Option<&Autoencoder<T>>,
) -> Result<(Denoiser<T>, Vec<f64>, CondDropStats)> {
    if corpus.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    let d_c = backbone_cfg.d_cond;
    if mmic.text_encoder.d_c() != d_c {
        return Err(Error::config("mmic conditioning width differs from backbone"));
    }

    let mut init = Initializer::new(stream_rng(cfg.seed, Stream::ModelInit, 70));
    let mut denoiser = Denoiser::<T>::new(backbone_cfg.clone(), &mut init)?;
    let mut opt = Adam::<T>::new(cfg.lr);
    let mut stats = CondDropStats::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = stream_rng(cfg.seed, Stream::TrainLoop, 2000 + epoch as u64);
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut d_grads = denoiser.zero_grads();
            let mut t_grads = mmic.text_encoder.zero_grads();
            let mut i_grads = mmic.image_head.proj.zero_grads();
            let mut batch_loss = 0.0;

            for (slot, &idx) in batch.iter().enumerate() {
                let mut rng = stream_rng(
                    cfg.seed,
                    Stream::TrainLoop,
                    derive_seed(global_step + slot as u64, Stream::CorpusSample, 3),
                );
                let sample = &corpus[idx];
                stats.samples += 1;

                // background dropout before encoding
                let used = if rng.gen::<f64>() < cfg.bg_drop_prob {
                    stats.bg_dropped += 1;
                    background_dropout(sample, cfg.bg_drop_fraction, 1.0, &mut rng)
                } else {
                    sample.clone()
                };

                // prompt and text stream
                let augmented = rng.gen::<f64>() >= cfg.plain_prompt_prob;
                let prompt = training_prompt(&used, mmic, augmented);
                let zero_text = rng.gen::<f64>() < cfg.text_drop_prob;
                let (text, text_mask, text_cache) = if zero_text {
                    stats.zero_text += 1;
                    (Array2::zeros((N_T_MAX, d_c)), vec![true; N_T_MAX], None)
                } else {
                    let (enc, mask, cache) = mmic.text_encoder.forward(&prompt);
                    (enc, mask, Some(cache))
                };

                // image-semantic stream through the frozen semantic trunk
                let patches = semantic_model.patch_features(&used.image)?;
                let image_stream = mmic.image_head.forward(&patches);

                let z0 = match autoencoder {
                    Some(ae) => ae.encode(&used.image),
                    None => pixel_encode(&used.image),
                };
                let t = rng.gen_range(1..=schedule.steps());
                let eps: Array3<T> = Array3::from_shape_simple_fn(z0.dim(), || {
                    c::<T>(rng.sample::<f64, _>(StandardNormal))
                });
                let z_t = noisy_latent(&z0, &eps, t, schedule);

                let bundle = ConditionBundle {
                    text,
                    text_mask,
                    image: image_stream,
                    identity: Array2::zeros((0, d_c)),
                    lambda_image: T::one(),
                    lambda_id: T::one(),
                };
                let (eps_pred, cache) = denoiser.forward(&z_t, t, &bundle, None)?;
                let n = c::<T>(eps_pred.len() as f64);
                let diff = &eps_pred - &eps;
                let loss = (diff.iter().map(|&d| d * d).sum::<T>() / n).to_f64().unwrap();
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "denoising loss became non-finite at epoch {epoch}"
                    )));
                }
                batch_loss += loss;
                let g_eps = diff.mapv(|d| c::<T>(2.0) * d / n);

                let (_, grads, bundle_grads, _) = denoiser.backward(&cache, &bundle, None, &g_eps);
                Denoiser::add_grads(&mut d_grads, &grads);
                if let Some(tc) = &text_cache {
                    t_grads.add(&mmic.text_encoder.backward(&prompt, tc, &bundle_grads.text));
                }
                i_grads.add(&mmic.image_head.backward(&patches, &bundle_grads.image));
            }
            global_step += batch.len() as u64;

            let inv = c::<T>(1.0 / batch.len() as f64);
            Denoiser::scale_grads(&mut d_grads, inv);
            t_grads.scale(inv);
            i_grads.w.mapv_inplace(|v| v * inv);
            if let Some(b) = i_grads.b.as_mut() {
                b.mapv_inplace(|v| v * inv);
            }

            let (mut ps, mut gs) = denoiser.zip_params(&d_grads);
            let (ps2, gs2) = mmic.text_encoder.zip_params(&t_grads);
            ps.extend(ps2);
            gs.extend(gs2);
            ps.push(mmic.image_head.proj.w.as_slice_mut().unwrap());
            gs.push(i_grads.w.as_slice().unwrap());
            ps.push(mmic.image_head.proj.b.as_mut().unwrap().as_slice_mut().unwrap());
            gs.push(i_grads.b.as_ref().unwrap().as_slice().unwrap());
            opt.step(&mut ps, &gs);

            epoch_loss += batch_loss;
            epoch_n += batch.len();
        }
        let mean = epoch_loss / epoch_n as f64;
        epoch_losses.push(mean);
        log::info!("pretrain epoch {epoch}: loss {mean:.5}");
    }

    Ok((denoiser, epoch_losses, stats))
}
