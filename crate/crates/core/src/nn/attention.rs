//! Single-head scaled dot-product attention with optional key masking.

use crate::num::{c, Real};
use ndarray::Array2;

/// Key/value projection pair for one conditioning stream (`d_c × d_attn`).
#[derive(Debug, Clone)]
pub struct StreamKv<T: Real> {
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct StreamKvGrads<T: Real> {
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
}

impl<T: Real> StreamKv<T> {
    pub fn zero_grads(&self) -> StreamKvGrads<T> {
        StreamKvGrads {
            w_k: Array2::zeros(self.w_k.dim()),
            w_v: Array2::zeros(self.w_v.dim()),
        }
    }
}

impl<T: Real> StreamKvGrads<T> {
    pub fn add(&mut self, other: &StreamKvGrads<T>) {
        self.w_k += &other.w_k;
        self.w_v += &other.w_v;
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache<T: Real> {
    pub probs: Array2<T>,
}

/// `softmax(q·kᵀ/√d)·v` with inactive keys (mask false) excluded.
///
/// `mask`, when present, must have one entry per key row. If every key is
/// masked the result is all zeros.
pub fn attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    mask: Option<&[bool]>,
) -> (Array2<T>, AttnCache<T>) {
    let d = q.ncols();
    let scale = T::one() / c::<T>(d as f64).sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);

    let any_active = mask.map_or(true, |m| m.iter().any(|&a| a));
    let (m_rows, n_keys) = logits.dim();
    let mut probs = Array2::zeros((m_rows, n_keys));
    if any_active {
        for (mut p_row, l_row) in probs.rows_mut().into_iter().zip(logits.rows()) {
            let mut max = T::neg_infinity();
            for (j, &l) in l_row.iter().enumerate() {
                if mask.map_or(true, |m| m[j]) && l > max {
                    max = l;
                }
            }
            let mut denom = T::zero();
            for (j, &l) in l_row.iter().enumerate() {
                if mask.map_or(true, |m| m[j]) {
                    let e = (l - max).exp();
                    p_row[j] = e;
                    denom += e;
                } else {
                    p_row[j] = T::zero();
                }
            }
            for p in p_row.iter_mut() {
                *p = *p / denom;
            }
        }
    }
    let out = probs.dot(v);
    (out, AttnCache { probs })
}

/// Backward of [`attention`]: returns `(g_q, g_k, g_v)`.
pub fn attention_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    cache: &AttnCache<T>,
    g_out: &Array2<T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let d = q.ncols();
    let scale = T::one() / c::<T>(d as f64).sqrt();
    let probs = &cache.probs;

    let g_v = probs.t().dot(g_out);
    let g_probs = g_out.dot(&v.t());

    // softmax backward per row: p ⊙ (g - <g, p>)
    let mut g_logits = Array2::zeros(probs.dim());
    for i in 0..probs.nrows() {
        let p_row = probs.row(i);
        let g_row = g_probs.row(i);
        let dot = p_row
            .iter()
            .zip(g_row.iter())
            .map(|(&p, &g)| p * g)
            .sum::<T>();
        for j in 0..probs.ncols() {
            g_logits[[i, j]] = p_row[j] * (g_row[j] - dot);
        }
    }
    g_logits.mapv_inplace(|x| x * scale);

    let g_q = g_logits.dot(k);
    let g_k = g_logits.t().dot(q);
    (g_q, g_k, g_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn loss(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, gy: &Array2<f64>) -> f64 {
        (&attention(q, k, v, None).0 * gy).sum()
    }

    #[test]
    fn attention_matches_hand_computed_single_token() {
        // one query, one key/value token: softmax over a single key is 1,
        // so the output must equal v exactly.
        let q = arr2(&[[0.3f64, -0.7]]);
        let k = arr2(&[[1.1f64, 0.2]]);
        let v = arr2(&[[0.5f64, -0.25]]);
        let (out, _) = attention(&q, &k, &v, None);
        assert_eq!(out, v);
    }

    #[test]
    fn attention_two_keys_matches_manual_softmax() {
        let q = arr2(&[[1.0f64, 0.0]]);
        let k = arr2(&[[1.0f64, 0.0], [0.0, 1.0]]);
        let v = arr2(&[[2.0f64, 0.0], [0.0, 4.0]]);
        let (out, _) = attention(&q, &k, &v, None);
        let scale = 1.0 / 2.0f64.sqrt();
        let (l0, l1) = (scale, 0.0);
        let z = l0.exp() + l1.exp();
        let (p0, p1) = (l0.exp() / z, l1.exp() / z);
        assert!((out[[0, 0]] - 2.0 * p0).abs() < 1e-15);
        assert!((out[[0, 1]] - 4.0 * p1).abs() < 1e-15);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let q = arr2(&[[0.4f64, 0.1]]);
        let k = arr2(&[[1.0f64, 0.0], [9.0, 9.0]]);
        let v = arr2(&[[2.0f64, 0.0], [100.0, 100.0]]);
        let (out_masked, _) = attention(&q, &k, &v, Some(&[true, false]));
        let (out_single, _) = attention(
            &q,
            &arr2(&[[1.0f64, 0.0]]),
            &arr2(&[[2.0f64, 0.0]]),
            None,
        );
        assert_eq!(out_masked, out_single);

        let (out_none, _) = attention(&q, &k, &v, Some(&[false, false]));
        assert!(out_none.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let q = arr2(&[[0.3f64, -0.7], [0.9, 0.1]]);
        let k = arr2(&[[1.1f64, 0.2], [-0.4, 0.8], [0.2, -0.6]]);
        let v = arr2(&[[0.5f64, -0.25], [1.5, 0.75], [-0.8, 0.3]]);
        let gy = arr2(&[[1.0f64, -0.5], [0.25, 0.8]]);

        let (_, cache) = attention(&q, &k, &v, None);
        let (gq, gk, gv) = attention_backward(&q, &k, &v, &cache, &gy);

        let h = 1e-6;
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[[i, j]] += h;
                qm[[i, j]] -= h;
                let fd = (loss(&qp, &k, &v, &gy) - loss(&qm, &k, &v, &gy)) / (2.0 * h);
                assert!((fd - gq[[i, j]]).abs() < 1e-7, "gq[{i},{j}]");
            }
        }
        for i in 0..k.nrows() {
            for j in 0..k.ncols() {
                let mut kp = k.clone();
                let mut km = k.clone();
                kp[[i, j]] += h;
                km[[i, j]] -= h;
                let fd = (loss(&q, &kp, &v, &gy) - loss(&q, &km, &v, &gy)) / (2.0 * h);
                assert!((fd - gk[[i, j]]).abs() < 1e-7, "gk[{i},{j}]");
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[[i, j]] += h;
                vm[[i, j]] -= h;
                let fd = (loss(&q, &k, &vp, &gy) - loss(&q, &k, &vm, &gy)) / (2.0 * h);
                assert!((fd - gv[[i, j]]).abs() < 1e-7, "gv[{i},{j}]");
            }
        }
    }
}
