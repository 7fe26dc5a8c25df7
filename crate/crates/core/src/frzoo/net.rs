//! Embedder networks: stacked conv blocks with per-architecture depth, width,
//! and pooling, global average pooling, and a linear embedding head. The
//! semantic architecture adds an attribute-regression head on its pooled
//! features and exposes pooled/patch features for the conditioning pathways.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{
    silu, silu_backward, AvgPool2, Conv2d, Conv2dGrads, Initializer, Linear, LinearGrads,
    MaxPool2,
};
use crate::num::{c, Real};
use crate::rng::{stream_rng, Stream};
use crate::synthface::SHAPE_PARAMS;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

/// Embedding width shared by every model in the zoo.
pub const EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Zoo architectures, named by depth and spatial pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Shallow2Avg,
    Mid3Max,
    Deep4Avg,
    Wide3Max,
    /// Designated semantic encoder: trained with an auxiliary
    /// attribute-regression head; its pooled features feed the conditioning
    /// and quality-metric pathways.
    Semantic,
}

impl ArchId {
    pub fn all_zoo() -> [ArchId; 4] {
        [ArchId::Shallow2Avg, ArchId::Mid3Max, ArchId::Deep4Avg, ArchId::Wide3Max]
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchId::Shallow2Avg => "shallow2avg",
            ArchId::Mid3Max => "mid3max",
            ArchId::Deep4Avg => "deep4avg",
            ArchId::Wide3Max => "wide3max",
            ArchId::Semantic => "semantic",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "shallow2avg" => Ok(ArchId::Shallow2Avg),
            "mid3max" => Ok(ArchId::Mid3Max),
            "deep4avg" => Ok(ArchId::Deep4Avg),
            "wide3max" => Ok(ArchId::Wide3Max),
            "semantic" => Ok(ArchId::Semantic),
            other => Err(Error::config(format!("unknown architecture {other}"))),
        }
    }

    fn channels(self) -> Vec<usize> {
        match self {
            ArchId::Shallow2Avg => vec![14, 28],
            ArchId::Mid3Max => vec![12, 24, 48],
            ArchId::Deep4Avg => vec![10, 20, 40, 56],
            ArchId::Wide3Max => vec![20, 40, 64],
            ArchId::Semantic => vec![16, 32, EMBED_DIM],
        }
    }

    fn pools(self) -> Vec<PoolKind> {
        match self {
            ArchId::Shallow2Avg | ArchId::Deep4Avg => {
                vec![PoolKind::Avg; self.channels().len()]
            }
            ArchId::Mid3Max | ArchId::Wide3Max => vec![PoolKind::Max; self.channels().len()],
            ArchId::Semantic => vec![PoolKind::Avg; 3],
        }
    }

    pub fn has_attr_head(self) -> bool {
        matches!(self, ArchId::Semantic)
    }
}

enum PoolCache {
    Avg { in_h: usize, in_w: usize },
    Max(crate::nn::conv::MaxPool2Cache),
}

pub struct FeatCache<T: Real> {
    pre_acts: Vec<Array3<T>>,
    conv_caches: Vec<crate::nn::conv::Conv2dCache<T>>,
    pool_caches: Vec<PoolCache>,
    pooled: Array1<T>,
    final_map_dim: (usize, usize, usize),
}

impl<T: Real> FeatCache<T> {
    pub fn pooled_view(&self) -> &Array1<T> {
        &self.pooled
    }
}

pub struct EmbedCache<T: Real> {
    pub feat: FeatCache<T>,
    norm: T,
    embedding: Array1<T>,
}

impl<T: Real> EmbedCache<T> {
    pub fn embedding_view(&self) -> &Array1<T> {
        &self.embedding
    }

    pub fn norm_value(&self) -> T {
        self.norm
    }
}

/// One face-recognition embedder.
#[derive(Debug, Clone)]
pub struct FrModel<T: Real> {
    pub name: String,
    pub arch: ArchId,
    pub(crate) convs: Vec<Conv2d<T>>,
    pub(crate) pools: Vec<PoolKind>,
    pub(crate) head: Linear<T>,
    pub(crate) attr_head: Option<Linear<T>>,
    /// Class prototypes used by the margin loss during training.
    pub(crate) prototypes: Array2<T>,
    pub threshold_far01: Option<T>,
    pub train_seed: u64,
}

#[derive(Debug, Clone)]
pub struct FrGrads<T: Real> {
    pub convs: Vec<Conv2dGrads<T>>,
    pub head: LinearGrads<T>,
    pub attr_head: Option<LinearGrads<T>>,
    pub prototypes: Array2<T>,
}

impl<T: Real> FrModel<T> {
    pub fn new(name: &str, arch: ArchId, n_classes: usize, seed: u64) -> Self {
        let mut init = Initializer::new(stream_rng(seed, Stream::ModelInit, 20));
        let channels = arch.channels();
        let mut convs = Vec::new();
        let mut cin = 3;
        for &cout in &channels {
            convs.push(Conv2d::new(init.conv(cout, cin, 3, 3), Array1::zeros(cout)));
            cin = cout;
        }
        let feat_dim = *channels.last().unwrap();
        FrModel {
            name: name.to_string(),
            arch,
            convs,
            pools: arch.pools(),
            head: Linear::new(init.dense(feat_dim, EMBED_DIM), Some(Array1::zeros(EMBED_DIM))),
            attr_head: arch
                .has_attr_head()
                .then(|| Linear::new(init.dense(feat_dim, SHAPE_PARAMS), Some(Array1::zeros(SHAPE_PARAMS)))),
            prototypes: init.dense(n_classes, EMBED_DIM),
            threshold_far01: None,
            train_seed: seed,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.head.w.nrows()
    }

    fn image_to_chw(img: &Image<T>) -> Result<Array3<T>> {
        let (h, w, ch) = img.dim();
        if ch != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {ch}")));
        }
        Ok(Array3::from_shape_fn((ch, h, w), |(ci, y, x)| img[[y, x, ci]]))
    }

    /// Conv trunk: blocks of conv → silu → pool, then global average pooling.
    pub fn forward_features(&self, img: &Image<T>) -> Result<(Array1<T>, FeatCache<T>)> {
        let mut x = Self::image_to_chw(img)?;
        let mut pre_acts = Vec::new();
        let mut conv_caches = Vec::new();
        let mut pool_caches = Vec::new();
        for (conv, pool) in self.convs.iter().zip(&self.pools) {
            let (h, cache) = conv.forward(&x);
            conv_caches.push(cache);
            let a = silu(&h);
            pre_acts.push(h);
            let (in_h, in_w) = (a.dim().1, a.dim().2);
            x = match pool {
                PoolKind::Avg => {
                    pool_caches.push(PoolCache::Avg { in_h, in_w });
                    AvgPool2::forward(&a)
                }
                PoolKind::Max => {
                    let (y, cache) = MaxPool2::forward(&a);
                    pool_caches.push(PoolCache::Max(cache));
                    y
                }
            };
        }
        let (ch, h, w) = x.dim();
        let denom = c::<T>((h * w) as f64);
        let pooled = Array1::from_shape_fn(ch, |ci| {
            x.index_axis(ndarray::Axis(0), ci).sum() / denom
        });
        Ok((
            pooled.clone(),
            FeatCache { pre_acts, conv_caches, pool_caches, pooled, final_map_dim: (ch, h, w) },
        ))
    }

    /// Backward through the trunk from a pooled-feature gradient to an
    /// image-space gradient (plus conv parameter grads).
    pub fn backward_features(
        &self,
        cache: &FeatCache<T>,
        g_pooled: &Array1<T>,
    ) -> (Image<T>, Vec<Conv2dGrads<T>>) {
        let (ch, h, w) = cache.final_map_dim;
        let denom = c::<T>((h * w) as f64);
        let mut gx = Array3::from_shape_fn((ch, h, w), |(ci, _, _)| g_pooled[ci] / denom);
        let mut conv_grads: Vec<Option<Conv2dGrads<T>>> = vec![None; self.convs.len()];
        for i in (0..self.convs.len()).rev() {
            let g_a = match &cache.pool_caches[i] {
                PoolCache::Avg { in_h, in_w } => AvgPool2::backward(&gx, *in_h, *in_w),
                PoolCache::Max(mc) => MaxPool2::backward(mc, &gx),
            };
            let g_h = silu_backward(&cache.pre_acts[i], &g_a);
            let (g_in, g_conv) = self.convs[i].backward(&cache.conv_caches[i], &g_h);
            conv_grads[i] = Some(g_conv);
            gx = g_in;
        }
        let (_, ih, iw) = gx.dim();
        let img_grad = Image::from_shape_fn((ih, iw, 3), |(y, x, ci)| gx[[ci, y, x]]);
        (img_grad, conv_grads.into_iter().map(|g| g.unwrap()).collect())
    }

    /// Unit-norm identity embedding of a face image.
    pub fn embed(&self, img: &Image<T>) -> Result<super::IdentityEmbedding<T>> {
        Ok(self.embed_with_cache(img)?.0)
    }

    pub fn embed_with_cache(
        &self,
        img: &Image<T>,
    ) -> Result<(super::IdentityEmbedding<T>, EmbedCache<T>)> {
        let (pooled, feat) = self.forward_features(img)?;
        let pre_norm = self
            .head
            .forward(&pooled.clone().insert_axis(ndarray::Axis(0)))
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        let norm = pre_norm.iter().map(|&v| v * v).sum::<T>().sqrt().max(c::<T>(1e-12));
        let embedding = pre_norm.mapv(|v| v / norm);
        let emb = super::IdentityEmbedding::new(embedding.clone())
            .map_err(|e| Error::Numeric(format!("embedding normalization failed: {e}")))?;
        Ok((emb, EmbedCache { feat, norm, embedding }))
    }

    /// Backward from an embedding-space gradient to an image-space gradient,
    /// through the normalization, head, and trunk.
    pub fn backward_embed(
        &self,
        cache: &EmbedCache<T>,
        g_embedding: &Array1<T>,
    ) -> (Image<T>, FrGrads<T>) {
        // e = g/||g||: dL/dg = (dL/de - <dL/de, e> e) / ||g||
        let dot = g_embedding
            .iter()
            .zip(cache.embedding.iter())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        let g_pre: Array1<T> = g_embedding
            .iter()
            .zip(cache.embedding.iter())
            .map(|(&g, &e)| (g - dot * e) / cache.norm)
            .collect();
        let g_pre2 = g_pre.insert_axis(ndarray::Axis(0));
        let pooled2 = cache.feat.pooled.clone().insert_axis(ndarray::Axis(0));
        let (g_pooled2, g_head) = self.head.backward(&pooled2, &g_pre2);
        let g_pooled = g_pooled2.index_axis(ndarray::Axis(0), 0).to_owned();
        let (g_img, g_convs) = self.backward_features(&cache.feat, &g_pooled);
        (
            g_img,
            FrGrads {
                convs: g_convs,
                head: g_head,
                attr_head: self.attr_head.as_ref().map(|h| h.zero_grads()),
                prototypes: Array2::zeros(self.prototypes.dim()),
            },
        )
    }

    /// Pooled penultimate features (pre-normalization); the semantic-feature
    /// substrate for conditioning and the Fréchet metric.
    pub fn semantic_features(&self, img: &Image<T>) -> Result<Array1<T>> {
        Ok(self.forward_features(img)?.0)
    }

    /// 2×2-region averages of the final conv map: four patch tokens of width
    /// `feat_dim`, row order top-left, top-right, bottom-left, bottom-right.
    pub fn patch_features(&self, img: &Image<T>) -> Result<Array2<T>> {
        let mut x = Self::image_to_chw(img)?;
        for (conv, pool) in self.convs.iter().zip(&self.pools) {
            let (h, _) = conv.forward(&x);
            let a = silu(&h);
            x = match pool {
                PoolKind::Avg => AvgPool2::forward(&a),
                PoolKind::Max => MaxPool2::forward(&a).0,
            };
        }
        let (ch, h, w) = x.dim();
        let (hh, hw) = (h / 2, w / 2);
        let mut out = Array2::zeros((4, ch));
        for py in 0..2 {
            for px in 0..2 {
                let denom = c::<T>((hh * hw) as f64);
                for ci in 0..ch {
                    let mut sum = T::zero();
                    for y in 0..hh {
                        for xx in 0..hw {
                            sum += x[[ci, py * hh + y, px * hw + xx]];
                        }
                    }
                    out[[py * 2 + px, ci]] = sum / denom;
                }
            }
        }
        Ok(out)
    }

    /// Attribute regression from pooled features (semantic architecture only).
    pub fn predict_attrs(&self, pooled: &Array1<T>) -> Option<Array1<T>> {
        self.attr_head.as_ref().map(|head| {
            head.forward(&pooled.clone().insert_axis(ndarray::Axis(0)))
                .index_axis(ndarray::Axis(0), 0)
                .to_owned()
        })
    }

    pub fn zero_grads(&self) -> FrGrads<T> {
        FrGrads {
            convs: self.convs.iter().map(|c| c.zero_grads()).collect(),
            head: self.head.zero_grads(),
            attr_head: self.attr_head.as_ref().map(|h| h.zero_grads()),
            prototypes: Array2::zeros(self.prototypes.dim()),
        }
    }

    pub fn zip_params<'a>(&'a mut self, g: &'a FrGrads<T>) -> (Vec<&'a mut [T]>, Vec<&'a [T]>) {
        let mut ps: Vec<&'a mut [T]> = Vec::new();
        let mut gs: Vec<&'a [T]> = Vec::new();
        for (conv, gc) in self.convs.iter_mut().zip(&g.convs) {
            ps.push(conv.w.as_slice_mut().unwrap());
            gs.push(gc.w.as_slice().unwrap());
            ps.push(conv.b.as_slice_mut().unwrap());
            gs.push(gc.b.as_slice().unwrap());
        }
        ps.push(self.head.w.as_slice_mut().unwrap());
        gs.push(g.head.w.as_slice().unwrap());
        ps.push(self.head.b.as_mut().unwrap().as_slice_mut().unwrap());
        gs.push(g.head.b.as_ref().unwrap().as_slice().unwrap());
        if let (Some(h), Some(gh)) = (self.attr_head.as_mut(), g.attr_head.as_ref()) {
            ps.push(h.w.as_slice_mut().unwrap());
            gs.push(gh.w.as_slice().unwrap());
            ps.push(h.b.as_mut().unwrap().as_slice_mut().unwrap());
            gs.push(gh.b.as_ref().unwrap().as_slice().unwrap());
        }
        ps.push(self.prototypes.as_slice_mut().unwrap());
        gs.push(g.prototypes.as_slice().unwrap());
        (ps, gs)
    }

    pub fn to_container(&self) -> Container {
        let manifest = serde_json::json!({
            "kind": "fr_model",
            "name": self.name,
            "architecture_id": self.arch.name(),
            "embed_dim": EMBED_DIM,
            "threshold_far01": self.threshold_far01.map(|t| t.to_f64().unwrap()),
            "train_seed": self.train_seed,
        });
        let mut ckpt = Container::new(manifest);
        for (i, conv) in self.convs.iter().enumerate() {
            ckpt.insert(&format!("conv{i}.w"), &conv.w);
            ckpt.insert(&format!("conv{i}.b"), &conv.b);
        }
        ckpt.insert("head.w", &self.head.w);
        ckpt.insert("head.b", self.head.b.as_ref().unwrap());
        if let Some(h) = &self.attr_head {
            ckpt.insert("attr_head.w", &h.w);
            ckpt.insert("attr_head.b", h.b.as_ref().unwrap());
        }
        ckpt.insert("prototypes", &self.prototypes);
        ckpt
    }

    pub fn from_container(ckpt: &Container) -> Result<Self> {
        let arch = ArchId::from_name(
            ckpt.manifest["architecture_id"]
                .as_str()
                .ok_or_else(|| Error::Container("architecture_id missing".into()))?,
        )?;
        let name = ckpt.manifest["name"].as_str().unwrap_or(arch.name()).to_string();
        let prototypes: Array2<T> = ckpt.get2("prototypes")?;
        let seed = ckpt.manifest["train_seed"].as_u64().unwrap_or(0);
        let mut model = FrModel::new(&name, arch, prototypes.nrows(), seed);
        for (i, conv) in model.convs.iter_mut().enumerate() {
            conv.w = ckpt.get2(&format!("conv{i}.w"))?;
            conv.b = ckpt.get1(&format!("conv{i}.b"))?;
        }
        model.head.w = ckpt.get2("head.w")?;
        model.head.b = Some(ckpt.get1("head.b")?);
        if let Some(h) = model.attr_head.as_mut() {
            h.w = ckpt.get2("attr_head.w")?;
            h.b = Some(ckpt.get1("attr_head.b")?);
        }
        model.prototypes = prototypes;
        model.threshold_far01 = ckpt.manifest["threshold_far01"].as_f64().map(c::<T>);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frzoo::similarity;
    use crate::synthface::make_corpus;

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let corpus = make_corpus::<f64>(2, 1, 0, 32).unwrap();
        for arch in ArchId::all_zoo() {
            let model = FrModel::<f64>::new(arch.name(), arch, 2, 7);
            let e1 = model.embed(&corpus[0].image).unwrap();
            let e2 = model.embed(&corpus[0].image).unwrap();
            assert_eq!(e1.vector(), e2.vector());
            let norm: f64 = e1.vector().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "{arch:?} norm {norm}");
        }
    }

    #[test]
    fn embed_input_gradient_matches_finite_differences() {
        let corpus = make_corpus::<f64>(2, 1, 3, 32).unwrap();
        // max-pooling architecture exercises the argmax backward too
        let model = FrModel::<f64>::new("m", ArchId::Mid3Max, 2, 11);
        let img = &corpus[0].image;
        let target = model.embed(&corpus[1].image).unwrap();

        let (emb, cache) = model.embed_with_cache(img).unwrap();
        let _ = similarity(&emb, &target);
        let (g_img, _) = model.backward_embed(&cache, target.vector());

        let h = 1e-5;
        let mut rng = stream_rng(8, Stream::Probe, 0);
        use rand::Rng;
        for _ in 0..12 {
            let idx = (rng.gen_range(0..32), rng.gen_range(0..32), rng.gen_range(0..3));
            let mut ip = img.clone();
            let mut im = img.clone();
            ip[idx] += h;
            im[idx] -= h;
            let f = |i: &Image<f64>| similarity(&model.embed(i).unwrap(), &target);
            let fd = (f(&ip) - f(&im)) / (2.0 * h);
            let an = g_img[idx];
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "at {idx:?}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn patch_features_shape_and_determinism() {
        let corpus = make_corpus::<f64>(2, 1, 5, 32).unwrap();
        let model = FrModel::<f64>::new("sem", ArchId::Semantic, 2, 3);
        let p1 = model.patch_features(&corpus[0].image).unwrap();
        let p2 = model.patch_features(&corpus[0].image).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.dim(), (4, EMBED_DIM));
    }

    #[test]
    fn checkpoint_round_trip_preserves_embeddings() {
        let corpus = make_corpus::<f64>(2, 1, 9, 32).unwrap();
        let mut model = FrModel::<f64>::new("sem", ArchId::Semantic, 2, 3);
        model.threshold_far01 = Some(0.25);
        let ckpt = model.to_container();
        let back = FrModel::<f64>::from_container(&ckpt).unwrap();
        assert_eq!(back.threshold_far01, Some(0.25));
        assert_eq!(
            model.embed(&corpus[0].image).unwrap().vector(),
            back.embed(&corpus[0].image).unwrap().vector()
        );
    }
}
