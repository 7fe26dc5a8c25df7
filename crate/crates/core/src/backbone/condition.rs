//! Conditioning streams and the decoupled cross-attention operation.
//!
//! Three streams share the conditioning width: text tokens (with a padding
//! mask), image-semantic tokens, and identity tokens. A stream with zero rows
//! is absent and contributes exactly zero; a stream whose weight is zero is
//! skipped entirely, so the output is bit-identical to the reduced
//! computation.

use crate::error::{Error, Result};
use crate::nn::{attention, attention_backward, AttnCache, StreamKv, StreamKvGrads};
use crate::num::Real;
use ndarray::Array2;

/// The three conditioning streams plus per-stream attention weights.
#[derive(Debug, Clone)]
pub struct ConditionBundle<T: Real> {
    /// Text tokens `(n_t, d_c)`; zero rows = absent.
    pub text: Array2<T>,
    /// Active flags per text token (false = padding, excluded from attention).
    pub text_mask: Vec<bool>,
    /// Image-semantic tokens `(n_i, d_c)`.
    pub image: Array2<T>,
    /// Identity tokens `(n_id, d_c)`.
    pub identity: Array2<T>,
    pub lambda_image: T,
    pub lambda_id: T,
}

impl<T: Real> ConditionBundle<T> {
    pub fn empty(d_c: usize) -> Self {
        ConditionBundle {
            text: Array2::zeros((0, d_c)),
            text_mask: Vec::new(),
            image: Array2::zeros((0, d_c)),
            identity: Array2::zeros((0, d_c)),
            lambda_image: T::one(),
            lambda_id: T::one(),
        }
    }

    /// Replace the text stream by a zero matrix of the same shape (the
    /// unconditional branch of classifier-free guidance). All positions stay
    /// active: the zero matrix is the condition, not an empty prompt.
    pub fn with_zero_text(&self) -> Self {
        let mut out = self.clone();
        out.text = Array2::zeros(self.text.dim());
        out.text_mask = vec![true; self.text.nrows()];
        out
    }

    pub fn validate(&self, d_c: usize) -> Result<()> {
        for (name, stream) in [("text", &self.text), ("image", &self.image), ("identity", &self.identity)] {
            if stream.nrows() > 0 && stream.ncols() != d_c {
                return Err(Error::shape(format!(
                    "{name} stream width {} != conditioning width {d_c}",
                    stream.ncols()
                )));
            }
        }
        if self.text_mask.len() != self.text.nrows() {
            return Err(Error::shape(format!(
                "text mask length {} != token count {}",
                self.text_mask.len(),
                self.text.nrows()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct StreamCache<T: Real> {
    k: Array2<T>,
    v: Array2<T>,
    attn: AttnCache<T>,
}

/// Forward cache for [`decoupled_attention`].
#[derive(Debug, Clone)]
pub struct DecoupledCache<T: Real> {
    q: Array2<T>,
    text: Option<StreamCache<T>>,
    image: Option<StreamCache<T>>,
    identity: Option<StreamCache<T>>,
}

/// Gradients with respect to the attention weights.
#[derive(Debug, Clone)]
pub struct DecoupledGrads<T: Real> {
    pub w_q: Array2<T>,
    pub text: StreamKvGrads<T>,
    pub image: StreamKvGrads<T>,
    pub identity: Option<StreamKvGrads<T>>,
}

/// Gradients with respect to the condition streams themselves.
#[derive(Debug, Clone)]
pub struct BundleGrads<T: Real> {
    pub text: Array2<T>,
    pub image: Array2<T>,
    pub identity: Array2<T>,
}

fn check_stream<T: Real>(name: &str, tokens: &Array2<T>, kv: &StreamKv<T>) -> Result<()> {
    if tokens.ncols() != kv.w_k.nrows() || tokens.ncols() != kv.w_v.nrows() {
        return Err(Error::shape(format!(
            "{name} stream width {} incompatible with projections {}x{} / {}x{}",
            tokens.ncols(),
            kv.w_k.nrows(),
            kv.w_k.ncols(),
            kv.w_v.nrows(),
            kv.w_v.ncols(),
        )));
    }
    Ok(())
}

/// Three-stream decoupled cross-attention:
///
/// `out = Attn(Q,K,V) + λ_image · Attn(Q,Kⁱ,Vⁱ) + λ_id · Attn(Q,K^id,V^id)`
///
/// with `Q = q_features · w_q` and per-stream keys/values projected from the
/// bundle tokens. Streams that are empty, weighted zero, or (for identity)
/// lacking projections are skipped, contributing exactly zero.
pub fn decoupled_attention<T: Real>(
    q_features: &Array2<T>,
    bundle: &ConditionBundle<T>,
    w_q: &Array2<T>,
    text_kv: &StreamKv<T>,
    image_kv: &StreamKv<T>,
    id_kv: Option<&StreamKv<T>>,
) -> Result<(Array2<T>, DecoupledCache<T>)> {
    if q_features.ncols() != w_q.nrows() {
        return Err(Error::shape(format!(
            "query width {} != w_q rows {}",
            q_features.ncols(),
            w_q.nrows()
        )));
    }
    let q = q_features.dot(w_q);
    let mut out = Array2::zeros((q.nrows(), w_q.ncols()));

    let mut run_stream = |tokens: &Array2<T>,
                          mask: Option<&[bool]>,
                          kv: &StreamKv<T>,
                          weight: T,
                          name: &str|
     -> Result<Option<StreamCache<T>>> {
        if tokens.nrows() == 0 || weight == T::zero() {
            return Ok(None);
        }
        check_stream(name, tokens, kv)?;
        let k = tokens.dot(&kv.w_k);
        let v = tokens.dot(&kv.w_v);
        let (a, attn) = attention(&q, &k, &v, mask);
        if weight == T::one() {
            out += &a;
        } else {
            out.scaled_add(weight, &a);
        }
        Ok(Some(StreamCache { k, v, attn }))
    };

    let text = run_stream(
        &bundle.text,
        Some(bundle.text_mask.as_slice()),
        text_kv,
        T::one(),
        "text",
    )?;
    let image = run_stream(&bundle.image, None, image_kv, bundle.lambda_image, "image")?;
    let identity = match id_kv {
        Some(kv) => run_stream(&bundle.identity, None, kv, bundle.lambda_id, "identity")?,
        None => None,
    };

    Ok((out, DecoupledCache { q, text, image, identity }))
}

/// Backward of [`decoupled_attention`]; returns the gradient with respect to
/// the query features, the attention weights, and the bundle streams.
#[allow(clippy::too_many_arguments)]
pub fn decoupled_attention_backward<T: Real>(
    q_features: &Array2<T>,
    bundle: &ConditionBundle<T>,
    w_q: &Array2<T>,
    text_kv: &StreamKv<T>,
    image_kv: &StreamKv<T>,
    id_kv: Option<&StreamKv<T>>,
    cache: &DecoupledCache<T>,
    g_out: &Array2<T>,
) -> (Array2<T>, DecoupledGrads<T>, BundleGrads<T>) {
    let mut g_q = Array2::zeros(cache.q.dim());

    let mut backward_stream = |tokens: &Array2<T>,
                               kv: &StreamKv<T>,
                               weight: T,
                               sc: &Option<StreamCache<T>>|
     -> (StreamKvGrads<T>, Array2<T>) {
        match sc {
            Some(sc) => {
                let g_stream_out = if weight == T::one() {
                    g_out.clone()
                } else {
                    g_out.mapv(|v| v * weight)
                };
                let (gq_s, gk, gv) =
                    attention_backward(&cache.q, &sc.k, &sc.v, &sc.attn, &g_stream_out);
                g_q += &gq_s;
                let g_tokens = gk.dot(&kv.w_k.t()) + gv.dot(&kv.w_v.t());
                let grads = StreamKvGrads {
                    w_k: tokens.t().dot(&gk),
                    w_v: tokens.t().dot(&gv),
                };
                (grads, g_tokens)
            }
            None => (kv.zero_grads(), Array2::zeros(tokens.dim())),
        }
    };

    let (g_text_kv, g_text) = backward_stream(&bundle.text, text_kv, T::one(), &cache.text);
    let (g_image_kv, g_image) =
        backward_stream(&bundle.image, image_kv, bundle.lambda_image, &cache.image);
    let (g_id_kv, g_identity) = match id_kv {
        Some(kv) => {
            let (g, t) = backward_stream(&bundle.identity, kv, bundle.lambda_id, &cache.identity);
            (Some(g), t)
        }
        None => (None, Array2::zeros(bundle.identity.dim())),
    };

    let g_q_features = g_q.dot(&w_q.t());
    let g_w_q = q_features.t().dot(&g_q);

    (
        g_q_features,
        DecoupledGrads {
            w_q: g_w_q,
            text: g_text_kv,
            image: g_image_kv,
            identity: g_id_kv,
        },
        BundleGrads {
            text: g_text,
            image: g_image,
            identity: g_identity,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;
    use crate::rng::{stream_rng, Stream};

    fn setup() -> (
        Array2<f64>,
        ConditionBundle<f64>,
        Array2<f64>,
        StreamKv<f64>,
        StreamKv<f64>,
        StreamKv<f64>,
    ) {
        let mut init = Initializer::new(stream_rng(3, Stream::ModelInit, 0));
        let q_features = init.dense::<f64>(5, 6);
        let bundle = ConditionBundle {
            text: init.dense::<f64>(4, 8),
            text_mask: vec![true, true, true, false],
            image: init.dense::<f64>(3, 8),
            identity: init.dense::<f64>(2, 8),
            lambda_image: 0.7,
            lambda_id: 1.3,
        };
        let w_q = init.dense::<f64>(6, 6);
        let text_kv = StreamKv { w_k: init.dense::<f64>(8, 6), w_v: init.dense::<f64>(8, 6) };
        let image_kv = StreamKv { w_k: init.dense::<f64>(8, 6), w_v: init.dense::<f64>(8, 6) };
        let id_kv = StreamKv { w_k: init.dense::<f64>(8, 6), w_v: init.dense::<f64>(8, 6) };
        (q_features, bundle, w_q, text_kv, image_kv, id_kv)
    }

    #[test]
    fn zero_weights_reduce_to_text_only_bit_exactly() {
        let (q, mut bundle, w_q, text_kv, image_kv, id_kv) = setup();
        bundle.lambda_image = 0.0;
        bundle.lambda_id = 0.0;
        let (full, _) =
            decoupled_attention(&q, &bundle, &w_q, &text_kv, &image_kv, Some(&id_kv)).unwrap();

        let text_only = ConditionBundle {
            image: Array2::zeros((0, 8)),
            identity: Array2::zeros((0, 8)),
            ..bundle.clone()
        };
        let (reduced, _) =
            decoupled_attention(&q, &text_only, &w_q, &text_kv, &image_kv, None).unwrap();
        assert_eq!(full, reduced);
    }

    #[test]
    fn empty_streams_contribute_exactly_zero() {
        let (q, bundle, w_q, text_kv, image_kv, id_kv) = setup();
        let no_image = ConditionBundle {
            image: Array2::zeros((0, 8)),
            ..bundle.clone()
        };
        let zero_image = ConditionBundle {
            lambda_image: 0.0,
            ..bundle.clone()
        };
        let (a, _) =
            decoupled_attention(&q, &no_image, &w_q, &text_kv, &image_kv, Some(&id_kv)).unwrap();
        let (b, _) =
            decoupled_attention(&q, &zero_image, &w_q, &text_kv, &image_kv, Some(&id_kv)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_image_and_identity_streams_double_up() {
        // identity stream equal to the image stream with equal weights and
        // shared projections: total = text + 2·image-attention
        let (q, bundle, w_q, text_kv, image_kv, _) = setup();
        let mut twin = bundle.clone();
        twin.identity = twin.image.clone();
        twin.lambda_image = 1.0;
        twin.lambda_id = 1.0;
        let (doubled, _) =
            decoupled_attention(&q, &twin, &w_q, &text_kv, &image_kv, Some(&image_kv)).unwrap();

        let mut text_only = bundle.clone();
        text_only.image = Array2::zeros((0, 8));
        text_only.identity = Array2::zeros((0, 8));
        let (text_part, _) =
            decoupled_attention(&q, &text_only, &w_q, &text_kv, &image_kv, None).unwrap();

        let mut image_only = bundle.clone();
        image_only.text = Array2::zeros((0, 8));
        image_only.text_mask = vec![];
        image_only.identity = Array2::zeros((0, 8));
        image_only.lambda_image = 1.0;
        let (image_part, _) =
            decoupled_attention(&q, &image_only, &w_q, &text_kv, &image_kv, None).unwrap();

        let expected = &text_part + &(&image_part * 2.0);
        let diff = (&doubled - &expected).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn single_token_streams_match_hand_computation() {
        // one query, one token per stream: each softmax is 1, so the output
        // is q-independent: out = C_t·W_v + λi·C_i·W_vᵢ + λid·C_id·W_v_id
        let mut init = Initializer::new(stream_rng(9, Stream::ModelInit, 1));
        let q_features = init.dense::<f64>(1, 4);
        let w_q = init.dense::<f64>(4, 4);
        let bundle = ConditionBundle {
            text: init.dense::<f64>(1, 5),
            text_mask: vec![true],
            image: init.dense::<f64>(1, 5),
            identity: init.dense::<f64>(1, 5),
            lambda_image: 0.6,
            lambda_id: 1.4,
        };
        let text_kv = StreamKv { w_k: init.dense::<f64>(5, 4), w_v: init.dense::<f64>(5, 4) };
        let image_kv = StreamKv { w_k: init.dense::<f64>(5, 4), w_v: init.dense::<f64>(5, 4) };
        let id_kv = StreamKv { w_k: init.dense::<f64>(5, 4), w_v: init.dense::<f64>(5, 4) };
        let (out, _) =
            decoupled_attention(&q_features, &bundle, &w_q, &text_kv, &image_kv, Some(&id_kv))
                .unwrap();
        let expected = bundle.text.dot(&text_kv.w_v)
            + bundle.image.dot(&image_kv.w_v) * 0.6
            + bundle.identity.dot(&id_kv.w_v) * 1.4;
        let diff = (&out - &expected).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn linearity_in_stream_weights_is_exact() {
        let (q, bundle, w_q, text_kv, image_kv, id_kv) = setup();
        let at = |li: f64, lid: f64| {
            let b = ConditionBundle { lambda_image: li, lambda_id: lid, ..bundle.clone() };
            decoupled_attention(&q, &b, &w_q, &text_kv, &image_kv, Some(&id_kv))
                .unwrap()
                .0
        };
        // three-point collinearity in lambda_image
        let (y0, y1, y2) = (at(0.0, 1.0), at(1.0, 1.0), at(2.0, 1.0));
        let lhs = &y2 - &y1;
        let rhs = &y1 - &y0;
        let diff = (&lhs - &rhs).mapv(f64::abs).iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "image-weight collinearity residual {diff}");
        // and in lambda_id
        let (z0, z1, z2) = (at(1.0, 0.0), at(1.0, 1.0), at(1.0, 2.0));
        let lhs = &z2 - &z1;
        let rhs = &z1 - &z0;
        let diff = (&lhs - &rhs).mapv(f64::abs).iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "identity-weight collinearity residual {diff}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (q, bundle, w_q, text_kv, image_kv, id_kv) = setup();
        let mut init = Initializer::new(stream_rng(11, Stream::ModelInit, 2));
        let gy = init.dense::<f64>(5, 6);

        let (_, cache) =
            decoupled_attention(&q, &bundle, &w_q, &text_kv, &image_kv, Some(&id_kv)).unwrap();
        let (g_qf, g_w, g_bundle) = decoupled_attention_backward(
            &q, &bundle, &w_q, &text_kv, &image_kv, Some(&id_kv), &cache, &gy,
        );

        let loss = |q: &Array2<f64>, b: &ConditionBundle<f64>, wq: &Array2<f64>| {
            (&decoupled_attention(q, b, wq, &text_kv, &image_kv, Some(&id_kv)).unwrap().0 * &gy)
                .sum()
        };
        let h = 1e-6;
        // query features
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[[i, j]] += h;
                qm[[i, j]] -= h;
                let fd = (loss(&qp, &bundle, &w_q) - loss(&qm, &bundle, &w_q)) / (2.0 * h);
                assert!((fd - g_qf[[i, j]]).abs() < 1e-6, "g_q[{i},{j}]");
            }
        }
        // identity tokens (the projector-training path)
        for i in 0..bundle.identity.nrows() {
            for j in 0..bundle.identity.ncols() {
                let mut bp = bundle.clone();
                let mut bm = bundle.clone();
                bp.identity[[i, j]] += h;
                bm.identity[[i, j]] -= h;
                let fd = (loss(&q, &bp, &w_q) - loss(&q, &bm, &w_q)) / (2.0 * h);
                assert!((fd - g_bundle.identity[[i, j]]).abs() < 1e-6, "g_id[{i},{j}]");
            }
        }
        // text tokens, including that padded rows receive zero gradient
        for i in 0..bundle.text.nrows() {
            for j in 0..bundle.text.ncols() {
                let mut bp = bundle.clone();
                let mut bm = bundle.clone();
                bp.text[[i, j]] += h;
                bm.text[[i, j]] -= h;
                let fd = (loss(&q, &bp, &w_q) - loss(&q, &bm, &w_q)) / (2.0 * h);
                assert!((fd - g_bundle.text[[i, j]]).abs() < 1e-6, "g_text[{i},{j}]");
            }
        }
        // w_q
        for i in 0..w_q.nrows() {
            for j in 0..w_q.ncols() {
                let mut wp = w_q.clone();
                let mut wm = w_q.clone();
                wp[[i, j]] += h;
                wm[[i, j]] -= h;
                let fd = (loss(&q, &bundle, &wp) - loss(&q, &bundle, &wm)) / (2.0 * h);
                assert!((fd - g_w.w_q[[i, j]]).abs() < 1e-6, "g_wq[{i},{j}]");
            }
        }
    }
}
