//! Procedural generator of identity-labeled synthetic face images.
//!
//! Faces are parametric geometric compositions (face oval, hair, eyes, nose,
//! mouth, optional glasses) whose geometry and colors are a deterministic
//! function of the attribute vector, over one of six fixed background styles.
//! Identity is therefore a ground-truth function of `shape_params`, and the
//! renderer knows the exact background mask: a pixel is background iff the
//! background color contributes to it at all (face interiors composite the
//! background with coefficient exactly zero).

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::num::{c, Real};
use crate::rng::{stream_rng, Stream};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Number of shape parameters per identity.
pub const SHAPE_PARAMS: usize = 8;

/// Number of fixed background styles.
pub const BACKGROUND_STYLES: u32 = 6;

/// Scene phrase associated with each background style, used to build
/// training prompts that actually predict image content.
pub const BACKGROUND_PHRASES: [&str; BACKGROUND_STYLES as usize] = [
    "in the park",
    "in the city",
    "at the beach",
    "in the office",
    "at sunset",
    "in the studio",
];

/// Identity-defining attributes plus per-sample nuisance variables.
///
/// `shape_params` order: face oval, eye spacing, eye size, nose size,
/// mouth width, skin tone, hair tone, accessory flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceAttributes {
    pub identity_id: u32,
    pub shape_params: Vec<f64>,
    pub pose_jitter: [f64; 2],
    pub background_id: u32,
}

impl FaceAttributes {
    pub fn validate(&self) -> Result<()> {
        if self.shape_params.len() != SHAPE_PARAMS {
            return Err(Error::config(format!(
                "expected {SHAPE_PARAMS} shape params, got {}",
                self.shape_params.len()
            )));
        }
        if self.shape_params.iter().any(|p| !(-1.0..=1.0).contains(p)) {
            return Err(Error::config("shape params must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// A rendered face with its attributes and exact background mask
/// (`true` = background pixel).
#[derive(Debug, Clone)]
pub struct FaceSample<T: Real> {
    pub image: Image<T>,
    pub attrs: FaceAttributes,
    pub background_mask: Array2<bool>,
}

const MIN_SIZE: usize = 16;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

/// Anti-aliased coverage from a normalized quadratic distance `d`
/// (negative inside): exactly 1 deep inside, exactly 0 well outside.
fn coverage(d: f64, aa: f64) -> f64 {
    (0.5 - d / aa).clamp(0.0, 1.0)
}

struct Canvas {
    pixels: Vec<[f64; 3]>,
    /// Remaining background visibility per pixel; 0 means fully covered.
    bg_weight: Vec<f64>,
    size: usize,
}

impl Canvas {
    fn new(size: usize, bg: impl Fn(f64, f64) -> [f64; 3]) -> Self {
        let mut pixels = vec![[0.0; 3]; size * size];
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64;
                let v = (y as f64 + 0.5) / size as f64;
                pixels[y * size + x] = bg(u, v);
            }
        }
        Canvas {
            pixels,
            bg_weight: vec![1.0; size * size],
            size,
        }
    }

    fn blend(&mut self, color: [f64; 3], alpha: impl Fn(f64, f64) -> f64) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 + 0.5) / s as f64;
                let v = (y as f64 + 0.5) / s as f64;
                let a = alpha(u, v);
                if a > 0.0 {
                    let p = &mut self.pixels[y * s + x];
                    for k in 0..3 {
                        p[k] = p[k] * (1.0 - a) + color[k] * a;
                    }
                    self.bg_weight[y * s + x] *= 1.0 - a;
                }
            }
        }
    }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, aa: f64) -> impl Fn(f64, f64) -> f64 {
    move |u, v| {
        let dx = (u - cx) / rx;
        let dy = (v - cy) / ry;
        coverage(dx * dx + dy * dy - 1.0, aa)
    }
}

fn ring(cx: f64, cy: f64, r: f64, thickness: f64, aa: f64) -> impl Fn(f64, f64) -> f64 {
    move |u, v| {
        let dist = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
        coverage((dist - r).abs() - thickness, aa)
    }
}

fn rect(cx: f64, cy: f64, hw: f64, hh: f64, aa: f64) -> impl Fn(f64, f64) -> f64 {
    move |u, v| {
        let d = ((u - cx).abs() / hw).max((v - cy).abs() / hh) - 1.0;
        coverage(d, aa)
    }
}

fn background_color(style: u32, u: f64, v: f64) -> [f64; 3] {
    match style % BACKGROUND_STYLES {
        0 => {
            // park: sky gradient over a grass band
            if v < 0.62 {
                lerp3([0.55, 0.76, 0.95], [0.72, 0.88, 0.80], v / 0.62)
            } else {
                let stripe = if ((u * 8.0) as u32) % 2 == 0 { 0.0 } else { 0.06 };
                [0.26 + stripe, 0.60 + stripe, 0.30]
            }
        }
        1 => {
            // city: pale sky with building bars
            let mut color = [0.70, 0.73, 0.79];
            let col = (u * 6.0) as u32 % 6;
            let height = [0.36, 0.58, 0.44, 0.66, 0.40, 0.54][col as usize];
            if v > 1.0 - height {
                color = if col % 2 == 0 { [0.34, 0.37, 0.44] } else { [0.42, 0.44, 0.52] };
            }
            color
        }
        2 => {
            // beach: sky, sea band, sand
            if v < 0.45 {
                [0.52, 0.78, 0.93]
            } else if v < 0.60 {
                [0.24, 0.55, 0.76]
            } else {
                [0.87, 0.77, 0.56]
            }
        }
        3 => {
            // office: warm wall with a window rectangle
            let mut color = [0.82, 0.78, 0.69];
            if (0.08..0.40).contains(&u) && (0.10..0.42).contains(&v) {
                color = [0.58, 0.64, 0.70];
            }
            color
        }
        4 => {
            // sunset gradient
            lerp3([0.96, 0.58, 0.24], [0.36, 0.20, 0.46], v)
        }
        _ => [0.24, 0.26, 0.33], // studio backdrop
    }
}

/// Render a face deterministically from its attributes.
///
/// Pure function: equal attributes produce bit-identical samples. Pixels whose
/// composited color retains any background contribution are marked background
/// in the mask; the face interior (mask complement) is independent of
/// `background_id`.
pub fn render_face<T: Real>(attrs: &FaceAttributes, size: usize) -> Result<FaceSample<T>> {
    if size < MIN_SIZE {
        return Err(Error::config(format!(
            "render size {size} below minimum {MIN_SIZE}"
        )));
    }
    attrs.validate()?;
    let p = &attrs.shape_params;
    let px = 1.0 / size as f64;
    let aa = 2.4 * px;

    let cx = 0.5 + attrs.pose_jitter[0] / size as f64;
    let cy = 0.52 + attrs.pose_jitter[1] / size as f64;

    let face_rx = 0.275 - 0.055 * p[0];
    let face_ry = 0.345 + 0.040 * p[0];
    let eye_dx = 0.105 + 0.034 * p[1];
    let eye_r = 0.043 + 0.017 * p[2];
    let nose_scale = 0.070 + 0.032 * p[3];
    let mouth_hw = 0.062 + 0.026 * p[4];

    let skin = lerp3([0.93, 0.80, 0.67], [0.47, 0.32, 0.22], (p[5] + 1.0) / 2.0);
    let hair = lerp3([0.88, 0.80, 0.52], [0.13, 0.09, 0.07], (p[6] + 1.0) / 2.0);
    let glasses = p[7] > 0.0;

    let eye_cy = cy - 0.075;
    let mouth_cy = cy + 0.175;

    let mut canvas = Canvas::new(size, |u, v| background_color(attrs.background_id, u, v));

    // hair rim behind the face
    canvas.blend(
        hair,
        ellipse(cx, cy - 0.065, face_rx * 1.22, face_ry * 0.92, aa),
    );
    canvas.blend(skin, ellipse(cx, cy, face_rx, face_ry, aa));
    // fringe
    canvas.blend(
        hair,
        rect(cx, cy - face_ry * 0.78, face_rx * 0.82, 0.055, aa),
    );

    for side in [-1.0, 1.0] {
        let ex = cx + side * eye_dx;
        canvas.blend([0.97, 0.97, 0.97], ellipse(ex, eye_cy, eye_r, eye_r * 0.82, aa));
        canvas.blend([0.09, 0.07, 0.10], ellipse(ex, eye_cy, eye_r * 0.45, eye_r * 0.45, aa));
    }

    let nose_shadow = [skin[0] * 0.78, skin[1] * 0.74, skin[2] * 0.72];
    canvas.blend(
        nose_shadow,
        ellipse(cx, cy + 0.035, nose_scale * 0.42, nose_scale, aa),
    );

    canvas.blend([0.71, 0.27, 0.30], ellipse(cx, mouth_cy, mouth_hw, 0.0205, aa));

    if glasses {
        let frame = [0.14, 0.14, 0.16];
        for side in [-1.0, 1.0] {
            canvas.blend(frame, ring(cx + side * eye_dx, eye_cy, eye_r * 1.55, 0.010, aa));
        }
        canvas.blend(frame, rect(cx, eye_cy, eye_dx - eye_r * 1.2, 0.008, aa));
    }

    let mut image: Image<T> = Array3::zeros((size, size, 3));
    let mut mask = Array2::from_elem((size, size), false);
    let scale = c::<T>(255.0);
    for y in 0..size {
        for x in 0..size {
            let idx = y * size + x;
            mask[[y, x]] = canvas.bg_weight[idx] > 0.0;
            for k in 0..3 {
                let v = canvas.pixels[idx][k].clamp(0.0, 1.0);
                image[[y, x, k]] = (c::<T>(v) * scale).round() / scale;
            }
        }
    }

    Ok(FaceSample {
        image,
        attrs: attrs.clone(),
        background_mask: mask,
    })
}

/// Default corpus image resolution.
pub const DEFAULT_SIZE: usize = 32;

/// Generate an identity-balanced corpus, reproducible from the seed.
///
/// Per-sample randomness is derived by counter so the result does not depend
/// on generation order. Identities are resampled if they land too close to an
/// existing identity in parameter space.
pub fn make_corpus<T: Real>(
    n_identities: u32,
    samples_per_id: u32,
    seed: u64,
    size: usize,
) -> Result<Vec<FaceSample<T>>> {
    if n_identities < 2 {
        return Err(Error::config("need at least 2 identities"));
    }
    if samples_per_id < 1 {
        return Err(Error::config("need at least 1 sample per identity"));
    }

    let mut params: Vec<Vec<f64>> = Vec::with_capacity(n_identities as usize);
    for id in 0..n_identities {
        let mut rng = stream_rng(seed, Stream::CorpusIdentity, id as u64);
        let mut tries = 0;
        let chosen = loop {
            let cand: Vec<f64> = (0..SHAPE_PARAMS).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let too_close = params.iter().any(|prev| {
                prev.iter()
                    .zip(&cand)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
                    < 0.22
            });
            if !too_close {
                break cand;
            }
            tries += 1;
            if tries > 200 {
                return Err(Error::Corpus(format!(
                    "could not place identity {id}: parameter space too crowded"
                )));
            }
        };
        params.push(chosen);
    }

    let mut corpus = Vec::with_capacity((n_identities * samples_per_id) as usize);
    for id in 0..n_identities {
        for k in 0..samples_per_id {
            let counter = id as u64 * samples_per_id as u64 + k as u64;
            let mut rng = stream_rng(seed, Stream::CorpusSample, counter);
            let attrs = FaceAttributes {
                identity_id: id,
                shape_params: params[id as usize].clone(),
                pose_jitter: [rng.gen_range(-1.5..=1.5), rng.gen_range(-1.5..=1.5)],
                background_id: rng.gen_range(0..BACKGROUND_STYLES),
            };
            corpus.push(render_face::<T>(&attrs, size)?);
        }
    }
    Ok(corpus)
}

/// Replace a uniformly chosen fraction of background pixels with neutral gray.
///
/// With probability `apply_prob` the dropout fires; it then grays exactly
/// `round(fraction * n_background)` mask pixels. Face pixels are never
/// modified.
pub fn background_dropout<T: Real>(
    sample: &FaceSample<T>,
    fraction: f64,
    apply_prob: f64,
    rng: &mut impl Rng,
) -> FaceSample<T> {
    debug_assert!((0.0..=1.0).contains(&fraction) && (0.0..=1.0).contains(&apply_prob));
    if apply_prob <= 0.0 || rng.gen::<f64>() >= apply_prob {
        return sample.clone();
    }
    let mut indices: Vec<(usize, usize)> = sample
        .background_mask
        .indexed_iter()
        .filter_map(|(pos, &bg)| bg.then_some(pos))
        .collect();
    let n_gray = ((indices.len() as f64) * fraction).round() as usize;
    // partial Fisher-Yates: only the first n_gray slots need shuffling
    for i in 0..n_gray.min(indices.len().saturating_sub(1)) {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut out = sample.clone();
    let gray = c::<T>(0.5);
    for &(y, x) in indices.iter().take(n_gray) {
        for k in 0..3 {
            out.image[[y, x, k]] = gray;
        }
    }
    out
}

/// Resubstitution accuracy of a nearest-centroid classifier in raw pixel
/// space with background pixels neutralized; the corpus self-test for
/// identity separability.
pub fn identity_separability<T: Real>(corpus: &[FaceSample<T>]) -> f64 {
    let mut ids: Vec<u32> = corpus.iter().map(|s| s.attrs.identity_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let features: Vec<Vec<f64>> = corpus
        .iter()
        .map(|s| {
            let mut v = Vec::with_capacity(s.image.len());
            let (h, w, _) = s.image.dim();
            for y in 0..h {
                for x in 0..w {
                    let bg = s.background_mask[[y, x]];
                    for k in 0..3 {
                        v.push(if bg {
                            0.5
                        } else {
                            s.image[[y, x, k]].to_f64().unwrap()
                        });
                    }
                }
            }
            v
        })
        .collect();

    let dim = features[0].len();
    let mut centroids: Vec<Vec<f64>> = vec![vec![0.0; dim]; ids.len()];
    let mut counts = vec![0usize; ids.len()];
    for (s, f) in corpus.iter().zip(&features) {
        let ci = ids.binary_search(&s.attrs.identity_id).unwrap();
        counts[ci] += 1;
        for (acc, &v) in centroids[ci].iter_mut().zip(f) {
            *acc += v;
        }
    }
    for (cen, &n) in centroids.iter_mut().zip(&counts) {
        for v in cen.iter_mut() {
            *v /= n as f64;
        }
    }

    let mut correct = 0usize;
    for (s, f) in corpus.iter().zip(&features) {
        let mut best = (f64::INFINITY, 0usize);
        for (ci, cen) in centroids.iter().enumerate() {
            let d: f64 = cen.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, ci);
            }
        }
        if ids[best.1] == s.attrs.identity_id {
            correct += 1;
        }
    }
    correct as f64 / corpus.len() as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    file: String,
    mask_file: String,
    identity_id: u32,
    background_id: u32,
    pose_dx: f64,
    pose_dy: f64,
    shape_params: String,
}

/// Persist a corpus as one PNG per sample plus a mask PNG and a metadata CSV.
pub fn save_corpus<T: Real>(corpus: &[FaceSample<T>], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("metadata.csv"))
        .map_err(|e| Error::Corpus(format!("metadata write: {e}")))?;
    let mut per_id = std::collections::BTreeMap::<u32, u32>::new();
    for sample in corpus {
        let id = sample.attrs.identity_id;
        let k = per_id.entry(id).or_insert(0);
        let file = format!("id{id:04}_s{k:02}.png");
        let mask_file = format!("id{id:04}_s{k:02}_mask.png");
        *k += 1;
        crate::imaging::save_png(&sample.image, &dir.join(&file))?;
        crate::imaging::save_mask(&sample.background_mask, &dir.join(&mask_file))?;
        let shape_params = sample
            .attrs
            .shape_params
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(" ");
        writer
            .serialize(MetaRow {
                file,
                mask_file,
                identity_id: id,
                background_id: sample.attrs.background_id,
                pose_dx: sample.attrs.pose_jitter[0],
                pose_dy: sample.attrs.pose_jitter[1],
                shape_params,
            })
            .map_err(|e| Error::Corpus(format!("metadata row: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Corpus(format!("metadata flush: {e}")))?;
    Ok(())
}

/// Load a corpus saved by [`save_corpus`].
pub fn load_corpus<T: Real>(dir: &Path) -> Result<Vec<FaceSample<T>>> {
    let meta = dir.join("metadata.csv");
    if !meta.exists() {
        return Err(Error::MissingArtifact(format!(
            "corpus metadata not found: {}",
            meta.display()
        )));
    }
    let mut reader =
        csv::Reader::from_path(&meta).map_err(|e| Error::Corpus(format!("metadata read: {e}")))?;
    let mut corpus = Vec::new();
    for row in reader.deserialize::<MetaRow>() {
        let row = row.map_err(|e| Error::Corpus(format!("metadata row: {e}")))?;
        let shape_params: Vec<f64> = row
            .shape_params
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Corpus(format!("shape param {s}: {e}")))
            })
            .collect::<Result<_>>()?;
        corpus.push(FaceSample {
            image: crate::imaging::load_png(&dir.join(&row.file))?,
            background_mask: crate::imaging::load_mask(&dir.join(&row.mask_file))?,
            attrs: FaceAttributes {
                identity_id: row.identity_id,
                shape_params,
                pose_jitter: [row.pose_dx, row.pose_dy],
                background_id: row.background_id,
            },
        });
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_attrs() -> FaceAttributes {
        FaceAttributes {
            identity_id: 0,
            shape_params: vec![0.3, -0.5, 0.1, 0.8, -0.2, 0.4, -0.9, 0.6],
            pose_jitter: [0.5, -0.7],
            background_id: 2,
        }
    }

    #[test]
    fn render_is_pure() {
        let a = render_face::<f64>(&demo_attrs(), 32).unwrap();
        let b = render_face::<f64>(&demo_attrs(), 32).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.background_mask, b.background_mask);
    }

    #[test]
    fn render_rejects_small_sizes() {
        assert!(render_face::<f64>(&demo_attrs(), 15).is_err());
        assert!(render_face::<f64>(&demo_attrs(), 16).is_ok());
    }

    #[test]
    fn background_change_only_touches_masked_pixels() {
        let mut attrs = demo_attrs();
        let a = render_face::<f64>(&attrs, 32).unwrap();
        attrs.background_id = 5;
        let b = render_face::<f64>(&attrs, 32).unwrap();
        assert_eq!(a.background_mask, b.background_mask);
        for ((y, x), &bg) in a.background_mask.indexed_iter() {
            if !bg {
                for k in 0..3 {
                    assert_eq!(
                        a.image[[y, x, k]],
                        b.image[[y, x, k]],
                        "face pixel ({y},{x},{k}) changed with background"
                    );
                }
            }
        }
        // the backgrounds themselves must actually differ
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn distinct_identities_differ_on_face_region() {
        let corpus = make_corpus::<f64>(4, 1, 0, 32).unwrap();
        for i in 0..corpus.len() {
            for j in (i + 1)..corpus.len() {
                let (a, b) = (&corpus[i], &corpus[j]);
                let mut dist = 0.0;
                let mut n = 0usize;
                for ((y, x), &bg_a) in a.background_mask.indexed_iter() {
                    if !bg_a && !b.background_mask[[y, x]] {
                        for k in 0..3 {
                            dist += (a.image[[y, x, k]] - b.image[[y, x, k]]).powi(2);
                        }
                        n += 1;
                    }
                }
                assert!(n > 0, "face regions must overlap");
                assert!(
                    (dist / n as f64) > 0.0,
                    "identities {i} and {j} render identically"
                );
            }
        }
    }

    #[test]
    fn corpus_is_reproducible_and_balanced() {
        let a = make_corpus::<f64>(6, 3, 0, 32).unwrap();
        let b = make_corpus::<f64>(6, 3, 0, 32).unwrap();
        assert_eq!(a.len(), 18);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.attrs, y.attrs);
        }
        let c = make_corpus::<f64>(6, 3, 1, 32).unwrap();
        assert!(
            a.iter().zip(&c).any(|(x, y)| x.image != y.image),
            "different seeds must change the corpus"
        );
    }

    #[test]
    fn two_identities_one_sample_each() {
        let corpus = make_corpus::<f64>(2, 1, 9, 32).unwrap();
        assert_eq!(corpus.len(), 2);
        let ids: std::collections::BTreeSet<u32> =
            corpus.iter().map(|s| s.attrs.identity_id).collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn dropout_zero_prob_is_identity() {
        let sample = render_face::<f64>(&demo_attrs(), 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = background_dropout(&sample, 0.5, 0.0, &mut rng);
        assert_eq!(out.image, sample.image);
    }

    #[test]
    fn dropout_half_grays_exactly_half_of_mask() {
        let sample = render_face::<f64>(&demo_attrs(), 32).unwrap();
        let n_bg = sample.background_mask.iter().filter(|&&m| m).count();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = background_dropout(&sample, 0.5, 1.0, &mut rng);
        let mut changed = 0usize;
        for ((y, x), &bg) in sample.background_mask.indexed_iter() {
            let differs = (0..3).any(|k| out.image[[y, x, k]] != sample.image[[y, x, k]]);
            if differs {
                assert!(bg, "face pixel ({y},{x}) modified by dropout");
                changed += 1;
            }
        }
        // beach background avoids exact 0.5, so every grayed pixel changes value
        assert_eq!(changed, ((n_bg as f64) * 0.5).round() as usize);
    }

    #[test]
    fn dropout_full_grays_every_masked_pixel() {
        let sample = render_face::<f64>(&demo_attrs(), 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = background_dropout(&sample, 1.0, 1.0, &mut rng);
        for ((y, x), &bg) in sample.background_mask.indexed_iter() {
            if bg {
                for k in 0..3 {
                    assert_eq!(out.image[[y, x, k]], 0.5);
                }
            }
        }
    }

    #[test]
    fn corpus_identities_are_separable() {
        let corpus = make_corpus::<f64>(16, 4, 0, 32).unwrap();
        let acc = identity_separability(&corpus);
        assert!(acc > 0.9, "separability {acc} too low");
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_corpus::<f64>(3, 2, 4, 32).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus::<f64>(dir.path()).unwrap();
        assert_eq!(back.len(), corpus.len());
        for (a, b) in corpus.iter().zip(&back) {
            assert_eq!(a.image, b.image, "png round trip must be lossless");
            assert_eq!(a.background_mask, b.background_mask);
            assert_eq!(a.attrs, b.attrs);
        }
    }
}
