//! Multi-modal customizer: closed-vocabulary tokenizer, face-description
//! templater, prompt augmentation, the learned text encoder, and the
//! image-semantic conditioning head over the frozen semantic model's patch
//! features.

pub mod templater;
pub mod text_encoder;
pub mod vocab;

pub use templater::describe_face;
pub use text_encoder::{TextEncoder, TextEncoderGrads};
pub use vocab::{augment_prompt, wrap_scene, Prompt, Vocabulary, DEFAULT_NEGATIVE_PROMPT, N_T_MAX};

use crate::container::Container;
use crate::error::Result;
use crate::frzoo::FrModel;
use crate::imaging::Image;
use crate::nn::{Initializer, Linear, LinearGrads};
use crate::num::Real;
use crate::rng::{stream_rng, Stream};
use ndarray::Array2;

/// Number of image-semantic tokens.
pub const N_I_TOKENS: usize = 4;

/// Learned projection from semantic patch features to the image-semantic
/// conditioning stream.
#[derive(Debug, Clone)]
pub struct ImageHead<T: Real> {
    pub proj: Linear<T>,
}

impl<T: Real> ImageHead<T> {
    pub fn new(feat_dim: usize, d_c: usize, init: &mut Initializer) -> Self {
        ImageHead {
            proj: Linear::new(init.dense(feat_dim, d_c), Some(ndarray::Array1::zeros(d_c))),
        }
    }

    pub fn forward(&self, patches: &Array2<T>) -> Array2<T> {
        self.proj.forward(patches)
    }

    pub fn backward(&self, patches: &Array2<T>, g_out: &Array2<T>) -> LinearGrads<T> {
        self.proj.backward(patches, g_out).1
    }
}

/// The trained multi-modal conditioning components plus the fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Mmic<T: Real> {
    pub vocab: Vocabulary,
    pub text_encoder: TextEncoder<T>,
    pub image_head: ImageHead<T>,
}

impl<T: Real> Mmic<T> {
    pub fn new(d_c: usize, feat_dim: usize, seed: u64) -> Self {
        let vocab = Vocabulary::default();
        let mut init = Initializer::new(stream_rng(seed, Stream::ModelInit, 60));
        Mmic {
            text_encoder: TextEncoder::new(vocab.len(), d_c, &mut init),
            image_head: ImageHead::new(feat_dim, d_c, &mut init),
            vocab,
        }
    }

    /// Text stream for a prompt: `(N_T_MAX × d_c)` plus pad mask.
    pub fn encode_text(&self, prompt: &Prompt) -> (Array2<T>, Vec<bool>) {
        self.text_encoder.encode(prompt)
    }

    /// Image-semantic stream: patch features of the frozen semantic model
    /// projected into conditioning width, `N_I_TOKENS` rows.
    pub fn encode_image_semantic(
        &self,
        semantic_model: &FrModel<T>,
        image: &Image<T>,
    ) -> Result<Array2<T>> {
        let patches = semantic_model.patch_features(image)?;
        Ok(self.image_head.forward(&patches))
    }

    pub fn to_container(&self) -> Container {
        let manifest = serde_json::json!({
            "kind": "mmic",
            "vocab_len": self.vocab.len(),
            "d_cond": self.text_encoder.d_c(),
            "vocabulary": self.vocab.to_file_contents(),
        });
        let mut ckpt = Container::new(manifest);
        self.text_encoder.save(&mut ckpt);
        ckpt.insert("image_head.w", &self.image_head.proj.w);
        ckpt.insert("image_head.b", self.image_head.proj.b.as_ref().unwrap());
        ckpt
    }

    pub fn from_container(ckpt: &Container) -> Result<Self> {
        let vocab = match ckpt.manifest["vocabulary"].as_str() {
            Some(contents) => Vocabulary::from_file_contents(contents)?,
            None => Vocabulary::default(),
        };
        let w: Array2<T> = ckpt.get2("image_head.w")?;
        let d_c = ckpt.manifest["d_cond"].as_u64().unwrap_or(64) as usize;
        let mut mmic = Mmic::new(d_c, w.nrows(), 0);
        mmic.vocab = vocab;
        mmic.text_encoder.load(ckpt)?;
        mmic.image_head.proj.w = w;
        mmic.image_head.proj.b = Some(ckpt.get1("image_head.b")?);
        Ok(mmic)
    }
}
