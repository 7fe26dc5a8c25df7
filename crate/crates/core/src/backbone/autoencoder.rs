//! Pixel/latent codecs.
//!
//! The default codec is the affine pixel map onto `[-1, 1]`. The optional
//! convolutional autoencoder compresses 3×S×S images to 4×(S/2)×(S/2)
//! latents, whitened by a scale computed on the training corpus.
//!
//! Both codecs expose two decode paths: `decode` produces an image snapped to
//! the 8-bit grid (what gets written to disk; exact inverse of `encode` for
//! on-grid pixel-mode images), and `decode_smooth` is the differentiable path
//! used by identity guidance, together with `decode_backward`.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{silu, silu_backward, Adam, AvgPool2, Conv2d, Initializer, Upsample2};
use crate::num::{c, Real};
use crate::rng::{stream_rng, Stream};
use crate::synthface::FaceSample;
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

/// Which latent space the diffusion runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Pixel,
    Autoencoder,
}

impl std::str::FromStr for LatentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(LatentMode::Pixel),
            "autoencoder" => Ok(LatentMode::Autoencoder),
            other => Err(Error::config(format!("unknown latent mode {other}"))),
        }
    }
}

fn image_to_chw<T: Real>(img: &Image<T>) -> Array3<T> {
    let (h, w, ch) = img.dim();
    Array3::from_shape_fn((ch, h, w), |(ci, y, x)| img[[y, x, ci]])
}

fn chw_to_image<T: Real>(x: &Array3<T>) -> Image<T> {
    let (ch, h, w) = x.dim();
    Image::from_shape_fn((h, w, ch), |(y, xx, ci)| x[[ci, y, xx]])
}

/// Affine pixel codec: `z = 2·x − 1` channel-first.
pub fn pixel_encode<T: Real>(img: &Image<T>) -> Array3<T> {
    let two = c::<T>(2.0);
    image_to_chw(img).mapv(|v| two * v - T::one())
}

fn pixel_decode_raw<T: Real>(z: &Array3<T>) -> Image<T> {
    let half = c::<T>(0.5);
    chw_to_image(&z.mapv(|v| (half * v + half).max(T::zero()).min(T::one())))
}

/// Pixel decode snapped to the 8-bit grid; exact inverse of [`pixel_encode`]
/// for images already on that grid.
pub fn pixel_decode<T: Real>(z: &Array3<T>) -> Image<T> {
    let mut img = pixel_decode_raw(z);
    crate::imaging::quantize_unit(&mut img);
    img
}

/// Differentiable pixel decode (clamped, not quantized).
pub fn pixel_decode_smooth<T: Real>(z: &Array3<T>) -> Image<T> {
    pixel_decode_raw(z)
}

/// Backward of [`pixel_decode_smooth`]: 0.5 inside the clamp, 0 outside.
pub fn pixel_decode_backward<T: Real>(z: &Array3<T>, g_img: &Image<T>) -> Array3<T> {
    let half = c::<T>(0.5);
    let g_chw = image_to_chw(g_img);
    let mut gz = Array3::zeros(z.dim());
    ndarray::Zip::from(&mut gz).and(z).and(&g_chw).for_each(|g, &zv, &gi| {
        let pre = half * zv + half;
        *g = if pre > T::zero() && pre < T::one() {
            half * gi
        } else {
            T::zero()
        };
    });
    gz
}

/// Small convolutional autoencoder (3×S×S ↔ 4×(S/2)×(S/2)).
#[derive(Debug, Clone)]
pub struct Autoencoder<T: Real> {
    enc1: Conv2d<T>,
    enc2: Conv2d<T>,
    dec1: Conv2d<T>,
    dec2: Conv2d<T>,
    dec3: Conv2d<T>,
    /// Latent whitening scale (divides on encode).
    pub latent_scale: T,
    pub image_size: usize,
}

pub const AE_LATENT_CHANNELS: usize = 4;
const AE_HIDDEN: usize = 24;

impl<T: Real> Autoencoder<T> {
    pub fn new(image_size: usize, seed: u64) -> Self {
        let mut init = Initializer::new(stream_rng(seed, Stream::ModelInit, 40));
        Autoencoder {
            enc1: Conv2d::new(init.conv(AE_HIDDEN, 3, 3, 3), Array1::zeros(AE_HIDDEN)),
            enc2: Conv2d::new(
                init.conv(AE_LATENT_CHANNELS, AE_HIDDEN, 3, 3),
                Array1::zeros(AE_LATENT_CHANNELS),
            ),
            dec1: Conv2d::new(
                init.conv(AE_HIDDEN, AE_LATENT_CHANNELS, 3, 3),
                Array1::zeros(AE_HIDDEN),
            ),
            dec2: Conv2d::new(init.conv(AE_HIDDEN, AE_HIDDEN, 3, 3), Array1::zeros(AE_HIDDEN)),
            dec3: Conv2d::new(init.conv(3, AE_HIDDEN, 3, 3), Array1::zeros(3)),
            latent_scale: T::one(),
            image_size,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 2
    }

    fn encode_raw(&self, img: &Image<T>) -> Array3<T> {
        let x = image_to_chw(img);
        let (h1, _) = self.enc1.forward(&x);
        let a1 = silu(&h1);
        let p = AvgPool2::forward(&a1);
        let (z, _) = self.enc2.forward(&p);
        z
    }

    pub fn encode(&self, img: &Image<T>) -> Array3<T> {
        let inv = T::one() / self.latent_scale;
        self.encode_raw(img).mapv(|v| v * inv)
    }

    fn decode_pre_clamp(&self, z: &Array3<T>) -> (Array3<T>, AeDecodeCache<T>) {
        let zs = z.mapv(|v| v * self.latent_scale);
        let (h1, c1) = self.dec1.forward(&zs);
        let a1 = silu(&h1);
        let up = Upsample2::forward(&a1);
        let (h2, c2) = self.dec2.forward(&up);
        let a2 = silu(&h2);
        let (out, c3) = self.dec3.forward(&a2);
        (out, AeDecodeCache { h1, h2, c1, c2, c3 })
    }

    /// Decode snapped to the 8-bit grid and clamped into `[0, 1]`.
    pub fn decode(&self, z: &Array3<T>) -> Image<T> {
        let mut img = self.decode_smooth(z);
        crate::imaging::quantize_unit(&mut img);
        img
    }

    /// Differentiable decode (clamped only).
    pub fn decode_smooth(&self, z: &Array3<T>) -> Image<T> {
        let (out, _) = self.decode_pre_clamp(z);
        chw_to_image(&out.mapv(|v| v.max(T::zero()).min(T::one())))
    }

    /// Gradient of [`Self::decode_smooth`] with respect to the latent.
    pub fn decode_backward(&self, z: &Array3<T>, g_img: &Image<T>) -> Array3<T> {
        let (pre, cache) = self.decode_pre_clamp(z);
        let mut g_out = image_to_chw(g_img);
        ndarray::Zip::from(&mut g_out).and(&pre).for_each(|g, &p| {
            if p <= T::zero() || p >= T::one() {
                *g = T::zero();
            }
        });
        let (g_a2, _) = self.dec3.backward(&cache.c3, &g_out);
        let g_h2 = silu_backward(&cache.h2, &g_a2);
        let (g_up, _) = self.dec2.backward(&cache.c2, &g_h2);
        let g_a1 = Upsample2::backward(&g_up);
        let g_h1 = silu_backward(&cache.h1, &g_a1);
        let (g_zs, _) = self.dec1.backward(&cache.c1, &g_h1);
        g_zs.mapv(|v| v * self.latent_scale)
    }

    pub fn to_container(&self) -> Container {
        let manifest = serde_json::json!({
            "kind": "autoencoder",
            "image_size": self.image_size,
            "latent_scale": self.latent_scale.to_f64().unwrap(),
        });
        let mut ckpt = Container::new(manifest);
        for (name, conv) in [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
            ("dec3", &self.dec3),
        ] {
            ckpt.insert(&format!("{name}.w"), &conv.w);
            ckpt.insert(&format!("{name}.b"), &conv.b);
        }
        ckpt
    }

    pub fn from_container(ckpt: &Container) -> Result<Self> {
        let image_size = ckpt.manifest["image_size"]
            .as_u64()
            .ok_or_else(|| Error::Container("autoencoder image_size missing".into()))?
            as usize;
        let mut ae = Autoencoder::new(image_size, 0);
        ae.latent_scale = c::<T>(
            ckpt.manifest["latent_scale"]
                .as_f64()
                .ok_or_else(|| Error::Container("autoencoder latent_scale missing".into()))?,
        );
        for (name, conv) in [
            ("enc1", &mut ae.enc1),
            ("enc2", &mut ae.enc2),
            ("dec1", &mut ae.dec1),
            ("dec2", &mut ae.dec2),
            ("dec3", &mut ae.dec3),
        ] {
            conv.w = ckpt.get2(&format!("{name}.w"))?;
            conv.b = ckpt.get1(&format!("{name}.b"))?;
        }
        Ok(ae)
    }
}

struct AeDecodeCache<T: Real> {
    h1: Array3<T>,
    h2: Array3<T>,
    c1: crate::nn::conv::Conv2dCache<T>,
    c2: crate::nn::conv::Conv2dCache<T>,
    c3: crate::nn::conv::Conv2dCache<T>,
}

/// Train the autoencoder on the corpus by plain reconstruction MSE, then set
/// the latent whitening scale to the per-element standard deviation of the
/// training latents.
pub fn train_autoencoder<T: Real>(
    corpus: &[FaceSample<T>],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(Autoencoder<T>, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    let size = corpus[0].image.dim().0;
    let mut ae = Autoencoder::<T>::new(size, seed);
    let mut opt = Adam::<T>::new(lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut rng = stream_rng(seed, Stream::TrainLoop, 41_000 + epoch as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let img = &corpus[idx].image;
            let x = image_to_chw(img);
            // full forward with caches
            let (h1, ce1) = ae.enc1.forward(&x);
            let a1 = silu(&h1);
            let p = AvgPool2::forward(&a1);
            let (z, ce2) = ae.enc2.forward(&p);
            let (dh1, cd1) = ae.dec1.forward(&z);
            let da1 = silu(&dh1);
            let up = Upsample2::forward(&da1);
            let (dh2, cd2) = ae.dec2.forward(&up);
            let da2 = silu(&dh2);
            let (out, cd3) = ae.dec3.forward(&da2);

            let n = c::<T>(out.len() as f64);
            let diff = &out - &x;
            let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
            let lf = loss.to_f64().unwrap();
            if !lf.is_finite() {
                return Err(Error::Training(format!(
                    "autoencoder loss became non-finite at epoch {epoch}"
                )));
            }
            epoch_loss += lf;

            let g_out = diff.mapv(|d| c::<T>(2.0) * d / n);
            let (g_da2, g_d3) = ae.dec3.backward(&cd3, &g_out);
            let g_dh2 = silu_backward(&dh2, &g_da2);
            let (g_up, g_d2) = ae.dec2.backward(&cd2, &g_dh2);
            let g_da1 = Upsample2::backward(&g_up);
            let g_dh1 = silu_backward(&dh1, &g_da1);
            let (g_z, g_d1) = ae.dec1.backward(&cd1, &g_dh1);
            let (g_p, g_e2) = ae.enc2.backward(&ce2, &g_z);
            let g_a1 = AvgPool2::backward(&g_p, size, size);
            let g_h1 = silu_backward(&h1, &g_a1);
            let (_, g_e1) = ae.enc1.backward(&ce1, &g_h1);

            opt.step(
                &mut [
                    ae.enc1.w.as_slice_mut().unwrap(),
                    ae.enc1.b.as_slice_mut().unwrap(),
                    ae.enc2.w.as_slice_mut().unwrap(),
                    ae.enc2.b.as_slice_mut().unwrap(),
                    ae.dec1.w.as_slice_mut().unwrap(),
                    ae.dec1.b.as_slice_mut().unwrap(),
                    ae.dec2.w.as_slice_mut().unwrap(),
                    ae.dec2.b.as_slice_mut().unwrap(),
                    ae.dec3.w.as_slice_mut().unwrap(),
                    ae.dec3.b.as_slice_mut().unwrap(),
                ],
                &[
                    g_e1.w.as_slice().unwrap(),
                    g_e1.b.as_slice().unwrap(),
                    g_e2.w.as_slice().unwrap(),
                    g_e2.b.as_slice().unwrap(),
                    g_d1.w.as_slice().unwrap(),
                    g_d1.b.as_slice().unwrap(),
                    g_d2.w.as_slice().unwrap(),
                    g_d2.b.as_slice().unwrap(),
                    g_d3.w.as_slice().unwrap(),
                    g_d3.b.as_slice().unwrap(),
                ],
            );
        }
        epoch_losses.push(epoch_loss / corpus.len() as f64);
    }

    // whitening scale from training latents
    let mut sq_sum = 0.0f64;
    let mut count = 0usize;
    for sample in corpus {
        let z = ae.encode_raw(&sample.image);
        sq_sum += z.iter().map(|&v| v.to_f64().unwrap().powi(2)).sum::<f64>();
        count += z.len();
    }
    let std = (sq_sum / count as f64).sqrt().max(1e-6);
    ae.latent_scale = c::<T>(std);
    Ok((ae, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::make_corpus;

    #[test]
    fn pixel_codec_round_trips_on_grid_images_exactly() {
        let corpus = make_corpus::<f64>(2, 1, 0, 32).unwrap();
        for sample in &corpus {
            let z = pixel_encode(&sample.image);
            let back = pixel_decode(&z);
            assert_eq!(back, sample.image);
        }
    }

    #[test]
    fn pixel_decode_is_clamped() {
        let z = ndarray::arr3(&[[[2.0f64, -3.0]]]);
        let img = pixel_decode_smooth(&z);
        assert_eq!(img[[0, 0, 0]], 1.0);
        assert_eq!(img[[0, 1, 0]], 0.0);
    }

    #[test]
    fn pixel_decode_gradient_matches_finite_differences() {
        let z = ndarray::arr3(&[[[0.3f64, -0.8], [1.7, -0.1]]]); // one clamped coord
        let g_img = Image::from_shape_fn((1, 2, 2), |(_, x, k)| 0.3 + x as f64 - 0.1 * k as f64)
            .into_dimensionality()
            .unwrap();
        let gz = pixel_decode_backward(&z, &g_img);
        let h = 1e-6;
        for (idx, _) in z.indexed_iter() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[idx] += h;
            zm[idx] -= h;
            let f = |z: &Array3<f64>| (&image_to_chw(&pixel_decode_smooth(z)) * &image_to_chw(&g_img)).sum();
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - gz[idx]).abs() < 1e-9, "at {idx:?}: fd {fd} vs {}", gz[idx]);
        }
    }

    #[test]
    fn autoencoder_decode_gradient_matches_finite_differences() {
        let ae = Autoencoder::<f64>::new(16, 3);
        let mut rng = stream_rng(5, Stream::ModelInit, 77);
        use rand::Rng;
        let z = Array3::from_shape_simple_fn((AE_LATENT_CHANNELS, 8, 8), || rng.gen_range(-0.5..0.5));
        let g_img = Image::from_shape_simple_fn((16, 16, 3), || rng.gen_range(-1.0..1.0));
        let gz = ae.decode_backward(&z, &g_img);
        let f = |z: &Array3<f64>| {
            let img = ae.decode_smooth(z);
            (&image_to_chw(&img) * &image_to_chw(&g_img)).sum()
        };
        let h = 1e-6;
        for _ in 0..20 {
            let idx = (
                rng.gen_range(0..AE_LATENT_CHANNELS),
                rng.gen_range(0..8),
                rng.gen_range(0..8),
            );
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[idx] += h;
            zm[idx] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!(
                (fd - gz[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "at {idx:?}: fd {fd} vs {}",
                gz[idx]
            );
        }
    }

    #[test]
    fn autoencoder_checkpoint_round_trips() {
        let corpus = make_corpus::<f64>(2, 2, 1, 16).unwrap();
        let (ae, _) = train_autoencoder(&corpus, 2, 1e-3, 7).unwrap();
        let ckpt = ae.to_container();
        let back = Autoencoder::<f64>::from_container(&ckpt).unwrap();
        let z = ae.encode(&corpus[0].image);
        let z2 = back.encode(&corpus[0].image);
        assert_eq!(z, z2);
        assert_eq!(ae.decode(&z), back.decode(&z2));
    }
}
