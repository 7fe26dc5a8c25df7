//! Embedder training (margin-based classification) and threshold calibration.

use super::net::{ArchId, FrModel};
use super::{similarity, IdentityEmbedding};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Adam;
use crate::num::{c, Real};
use crate::rng::{stream_rng, Stream};
use crate::synthface::FaceSample;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct TrainFrConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Additive cosine margin applied to the true class.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
    /// Weight of the attribute-regression loss (semantic architecture only).
    pub attr_weight: f64,
    /// Hard floor on held-out verification accuracy.
    pub min_accuracy: f64,
}

impl Default for TrainFrConfig {
    fn default() -> Self {
        TrainFrConfig {
            epochs: 14,
            batch_size: 32,
            lr: 2e-3,
            margin: 0.2,
            scale: 16.0,
            attr_weight: 2.0,
            min_accuracy: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainFrReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_accuracy: f64,
    pub genuine_mean: f64,
    pub impostor_mean: f64,
}

fn split_holdout<T: Real>(corpus: &[FaceSample<T>]) -> (Vec<usize>, Vec<usize>) {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        by_id.entry(s.attrs.identity_id).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (_, idxs) in by_id {
        let k = (idxs.len() / 5).max(1).min(idxs.len() - 1);
        let cut = idxs.len() - k;
        train.extend_from_slice(&idxs[..cut]);
        held.extend_from_slice(&idxs[cut..]);
    }
    (train, held)
}

/// Class ids remapped to a dense range, in ascending identity order.
fn class_index<T: Real>(corpus: &[FaceSample<T>]) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = corpus.iter().map(|s| s.attrs.identity_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Train one embedder with an additive-margin softmax over identities.
/// Deterministic given the seed; fails if the corpus is too small or the
/// held-out verification accuracy lands below the configured floor.
pub fn train_fr<T: Real>(
    corpus: &[FaceSample<T>],
    arch: ArchId,
    seed: u64,
    cfg: &TrainFrConfig,
) -> Result<(FrModel<T>, TrainFrReport)> {
    let classes = class_index(corpus);
    let n_classes = classes.len();
    if n_classes < 2 {
        return Err(Error::Corpus("need at least 2 identities".into()));
    }
    {
        let mut counts = BTreeMap::<u32, usize>::new();
        for s in corpus {
            *counts.entry(s.attrs.identity_id).or_default() += 1;
        }
        if counts.values().any(|&n| n < 2) {
            return Err(Error::Corpus("need at least 2 samples per identity".into()));
        }
    }

    let (train_idx, held_idx) = split_holdout(corpus);
    let mut model = FrModel::<T>::new(arch.name(), arch, n_classes, seed);
    let mut opt = Adam::<T>::new(cfg.lr);
    let s_scale = c::<T>(cfg.scale);
    let margin = c::<T>(cfg.margin);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(seed, Stream::TrainLoop, 1000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            let mut batch_loss = T::zero();
            for &idx in batch {
                let sample = &corpus[idx];
                let y = classes[&sample.attrs.identity_id];
                let (emb, cache) = model.embed_with_cache(&sample.image)?;

                // normalized prototypes
                let mut w_norms = Array1::zeros(n_classes);
                let mut w_hat = Array2::zeros((n_classes, super::net::EMBED_DIM));
                for j in 0..n_classes {
                    let row = model.prototypes.row(j);
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(c::<T>(1e-12));
                    w_norms[j] = norm;
                    for d in 0..row.len() {
                        w_hat[[j, d]] = row[d] / norm;
                    }
                }
                let cos: Array1<T> = (0..n_classes)
                    .map(|j| {
                        emb.vector()
                            .iter()
                            .zip(w_hat.row(j).iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                    })
                    .collect();
                let logits: Array1<T> = (0..n_classes)
                    .map(|j| {
                        let m = if j == y { margin } else { T::zero() };
                        s_scale * (cos[j] - m)
                    })
                    .collect();
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let exps = logits.mapv(|l| (l - max).exp());
                let denom = exps.sum();
                let p = exps.mapv(|e| e / denom);
                let loss = -(p[y].max(c::<T>(1e-30))).ln();
                batch_loss += loss;

                // d loss / d cos_j = s * (p_j - 1[j==y])
                let mut g_emb = Array1::<T>::zeros(emb.dim());
                for j in 0..n_classes {
                    let dcos = s_scale * (p[j] - if j == y { T::one() } else { T::zero() });
                    for d in 0..g_emb.len() {
                        g_emb[d] += dcos * w_hat[[j, d]];
                    }
                    // prototype gradient through its row normalization
                    let gw_dot = emb
                        .vector()
                        .iter()
                        .zip(w_hat.row(j).iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    for d in 0..g_emb.len() {
                        let g_raw = dcos * (emb.vector()[d] - gw_dot * w_hat[[j, d]]) / w_norms[j];
                        grads.prototypes[[j, d]] += g_raw;
                    }
                }

                // embedding normalization backward
                let dot = g_emb
                    .iter()
                    .zip(cache.embedding_view().iter())
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
                let g_pre: Array1<T> = g_emb
                    .iter()
                    .zip(cache.embedding_view().iter())
                    .map(|(&g, &e)| (g - dot * e) / cache.norm_value())
                    .collect();
                let g_pre2 = g_pre.insert_axis(ndarray::Axis(0));
                let pooled2 = cache.feat.pooled_view().clone().insert_axis(ndarray::Axis(0));
                let (g_pooled2, g_head) = model.head.backward(&pooled2, &g_pre2);
                grads.head.add(&g_head);
                let mut g_pooled = g_pooled2.index_axis(ndarray::Axis(0), 0).to_owned();

                // auxiliary attribute regression on the pooled features
                if let Some(attr_head) = &model.attr_head {
                    let targets: Array1<T> = sample
                        .attrs
                        .shape_params
                        .iter()
                        .map(|&v| c::<T>(v))
                        .collect();
                    let pred = attr_head
                        .forward(&pooled2)
                        .index_axis(ndarray::Axis(0), 0)
                        .to_owned();
                    let k = c::<T>(targets.len() as f64);
                    let diff = &pred - &targets;
                    let attr_loss = diff.iter().map(|&d| d * d).sum::<T>() / k;
                    batch_loss += c::<T>(cfg.attr_weight) * attr_loss;
                    let g_attr_out = diff
                        .mapv(|d| c::<T>(2.0 * cfg.attr_weight) * d / k)
                        .insert_axis(ndarray::Axis(0));
                    let (g_pooled_attr, g_attr_head) = attr_head.backward(&pooled2, &g_attr_out);
                    grads
                        .attr_head
                        .as_mut()
                        .expect("attr grads present")
                        .add(&g_attr_head);
                    g_pooled += &g_pooled_attr.index_axis(ndarray::Axis(0), 0);
                }

                let (_, g_convs) = model.backward_features(&cache.feat, &g_pooled);
                for (acc, g) in grads.convs.iter_mut().zip(&g_convs) {
                    acc.add(g);
                }
            }

            let lf = batch_loss.to_f64().unwrap() / batch.len() as f64;
            if !lf.is_finite() {
                return Err(Error::Training(format!(
                    "{}: loss became non-finite at epoch {epoch}",
                    arch.name()
                )));
            }
            epoch_loss += lf * batch.len() as f64;

            let inv = c::<T>(1.0 / batch.len() as f64);
            let scale_grads = |g: &mut super::net::FrGrads<T>| {
                for gc in g.convs.iter_mut() {
                    gc.w.mapv_inplace(|v| v * inv);
                    gc.b.mapv_inplace(|v| v * inv);
                }
                g.head.w.mapv_inplace(|v| v * inv);
                if let Some(b) = g.head.b.as_mut() {
                    b.mapv_inplace(|v| v * inv);
                }
                if let Some(ah) = g.attr_head.as_mut() {
                    ah.w.mapv_inplace(|v| v * inv);
                    if let Some(b) = ah.b.as_mut() {
                        b.mapv_inplace(|v| v * inv);
                    }
                }
                g.prototypes.mapv_inplace(|v| v * inv);
            };
            scale_grads(&mut grads);
            let (mut ps, gs) = model.zip_params(&grads);
            opt.step(&mut ps, &gs);
        }
        epoch_losses.push(epoch_loss / order.len() as f64);
    }

    // held-out verification accuracy
    let held_embs: Vec<(u32, IdentityEmbedding<T>)> = held_idx
        .iter()
        .map(|&i| Ok((corpus[i].attrs.identity_id, model.embed(&corpus[i].image)?)))
        .collect::<Result<_>>()?;
    let train_last: BTreeMap<u32, IdentityEmbedding<T>> = {
        let mut m = BTreeMap::new();
        for &i in &train_idx {
            m.insert(corpus[i].attrs.identity_id, model.embed(&corpus[i].image)?);
        }
        m
    };
    let mut genuine = Vec::new();
    let mut by_id: BTreeMap<u32, Vec<&IdentityEmbedding<T>>> = BTreeMap::new();
    for (id, e) in &held_embs {
        by_id.entry(*id).or_default().push(e);
    }
    for (id, embs) in &by_id {
        if embs.len() >= 2 {
            for i in 0..embs.len() {
                for j in (i + 1)..embs.len() {
                    genuine.push(similarity(embs[i], embs[j]).to_f64().unwrap());
                }
            }
        } else {
            genuine.push(similarity(embs[0], &train_last[id]).to_f64().unwrap());
        }
    }
    let mut impostor = Vec::new();
    let mut rng = stream_rng(seed, Stream::Calibration, 77);
    let max_imp = 1000.min(held_embs.len() * (held_embs.len().saturating_sub(1)));
    while impostor.len() < max_imp {
        let i = rng.gen_range(0..held_embs.len());
        let j = rng.gen_range(0..held_embs.len());
        if held_embs[i].0 != held_embs[j].0 {
            impostor.push(similarity(&held_embs[i].1, &held_embs[j].1).to_f64().unwrap());
        }
    }
    let accuracy = best_threshold_accuracy(&genuine, &impostor);
    let genuine_mean = genuine.iter().sum::<f64>() / genuine.len() as f64;
    let impostor_mean = impostor.iter().sum::<f64>() / impostor.len() as f64;
    if accuracy < cfg.min_accuracy {
        return Err(Error::Training(format!(
            "{}: held-out verification accuracy {accuracy:.3} below floor {}",
            arch.name(),
            cfg.min_accuracy
        )));
    }

    log::info!(
        "trained {} ({} params in {} convs): accuracy {accuracy:.3}, genuine {genuine_mean:.3} vs impostor {impostor_mean:.3}",
        arch.name(),
        model.prototypes.len(),
        model.convs.len()
    );
    Ok((
        model,
        TrainFrReport { epoch_losses, holdout_accuracy: accuracy, genuine_mean, impostor_mean },
    ))
}

/// Accuracy at the best single threshold separating genuine from impostor
/// similarity scores.
pub fn best_threshold_accuracy(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut labeled: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    labeled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total = labeled.len() as f64;
    let n_genuine = genuine.len() as f64;
    // sweeping the threshold upward: genuine below the threshold are errors,
    // impostors below are correct rejections
    let mut best = n_genuine / total; // threshold below everything: all match
    let mut genuine_below = 0.0;
    let mut impostor_below = 0.0;
    for &(_, is_genuine) in &labeled {
        if is_genuine {
            genuine_below += 1.0;
        } else {
            impostor_below += 1.0;
        }
        let acc = (n_genuine - genuine_below + impostor_below) / total;
        if acc > best {
            best = acc;
        }
    }
    best
}

/// Sample cross-identity image pairs from a corpus.
pub fn impostor_pairs<T: Real>(
    corpus: &[FaceSample<T>],
    n: usize,
    seed: u64,
) -> Vec<(Image<T>, Image<T>)> {
    let mut rng = stream_rng(seed, Stream::Calibration, 500);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let i = rng.gen_range(0..corpus.len());
        let j = rng.gen_range(0..corpus.len());
        if corpus[i].attrs.identity_id != corpus[j].attrs.identity_id {
            pairs.push((corpus[i].image.clone(), corpus[j].image.clone()));
        }
    }
    pairs
}

/// Calibrate the verification threshold at the given false-acceptance rate:
/// the `(1 − far)` empirical quantile of impostor similarities, stored on the
/// model. Requires at least 1000 impostor pairs.
pub fn calibrate_far<T: Real>(
    model: &mut FrModel<T>,
    pairs: &[(Image<T>, Image<T>)],
    far: f64,
) -> Result<T> {
    if pairs.len() < 1000 {
        return Err(Error::config(format!(
            "calibration needs >= 1000 impostor pairs, got {}",
            pairs.len()
        )));
    }
    if !(far > 0.0 && far < 0.5) {
        return Err(Error::config(format!("far {far} outside (0, 0.5)")));
    }
    let threshold = impostor_quantile(model, pairs, far)?;
    model.threshold_far01 = Some(threshold);
    let measured = measured_far(model, pairs)?;
    if measured < far / 2.0 || measured > far * 2.0 {
        log::warn!(
            "{}: measured FAR {measured:.4} at calibrated threshold is outside [{:.4}, {:.4}] (degenerate similarity distribution?)",
            model.name,
            far / 2.0,
            far * 2.0
        );
    }
    Ok(threshold)
}

/// The `(1 − far)` empirical quantile (k-th smallest with `k = ceil((1−far)·n)`)
/// of impostor similarities under the model.
pub fn impostor_quantile<T: Real>(
    model: &FrModel<T>,
    pairs: &[(Image<T>, Image<T>)],
    far: f64,
) -> Result<T> {
    let mut sims: Vec<T> = pairs
        .iter()
        .map(|(a, b)| Ok(similarity(&model.embed(a)?, &model.embed(b)?)))
        .collect::<Result<_>>()?;
    sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sims.len();
    let k = ((1.0 - far) * n as f64).ceil() as usize;
    Ok(sims[k.clamp(1, n) - 1])
}

/// Fraction of pairs accepted at the stored threshold (inclusive comparison).
pub fn measured_far<T: Real>(model: &FrModel<T>, pairs: &[(Image<T>, Image<T>)]) -> Result<f64> {
    let threshold = model.threshold_far01.ok_or(Error::Uncalibrated)?;
    let mut hits = 0usize;
    for (a, b) in pairs {
        if similarity(&model.embed(a)?, &model.embed(b)?) >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Pearson correlation of two models' similarity scores over a shared pair
/// set; the zoo-diversity guard.
pub fn impostor_score_correlation<T: Real>(
    a: &FrModel<T>,
    b: &FrModel<T>,
    pairs: &[(Image<T>, Image<T>)],
) -> Result<f64> {
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ys = Vec::with_capacity(pairs.len());
    for (p, q) in pairs {
        xs.push(similarity(&a.embed(p)?, &a.embed(q)?).to_f64().unwrap());
        ys.push(similarity(&b.embed(p)?, &b.embed(q)?).to_f64().unwrap());
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()).max(1e-12))
}
