//! Layer normalization over the feature (last) axis of a row matrix.
//!
//! Convolutional feature maps are normalized per spatial position across
//! channels by viewing them as `(H·W, C)` rows.

use crate::num::{c, Real};
use ndarray::{Array1, Array2};

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Real> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads<T: Real> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T: Real> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::from_elem(dim, T::one()),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = c::<T>(x.ncols() as f64);
        let eps = c::<T>(EPS);
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            *inv = is;
        }
        let mut y = normalized.clone();
        for mut row in y.rows_mut() {
            for (v, (&g, &b)) in row.iter_mut().zip(self.gamma.iter().zip(self.beta.iter())) {
                *v = *v * g + b;
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        gy: &Array2<T>,
    ) -> (Array2<T>, LayerNormGrads<T>) {
        let n = cache.normalized.nrows();
        let d = cache.normalized.ncols();
        let df = c::<T>(d as f64);

        let mut g_gamma = Array1::zeros(d);
        let mut g_beta = Array1::zeros(d);
        let mut gx = Array2::zeros((n, d));

        for i in 0..n {
            let x_hat = cache.normalized.row(i);
            let gy_row = gy.row(i);
            // accumulate parameter grads
            for j in 0..d {
                g_gamma[j] += gy_row[j] * x_hat[j];
                g_beta[j] += gy_row[j];
            }
            // dL/dx_hat = gy * gamma
            let gxh: Vec<T> = (0..d).map(|j| gy_row[j] * self.gamma[j]).collect();
            let sum_gxh = gxh.iter().copied().sum::<T>();
            let sum_gxh_xhat = gxh
                .iter()
                .zip(x_hat.iter())
                .map(|(&a, &b)| a * b)
                .sum::<T>();
            let inv = cache.inv_std[i];
            for j in 0..d {
                gx[[i, j]] = inv * (gxh[j] - sum_gxh / df - x_hat[j] * sum_gxh_xhat / df);
            }
        }
        (gx, LayerNormGrads { gamma: g_gamma, beta: g_beta })
    }

    pub fn zero_grads(&self) -> LayerNormGrads<T> {
        LayerNormGrads {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }
}

impl<T: Real> LayerNormGrads<T> {
    pub fn add(&mut self, other: &LayerNormGrads<T>) {
        self.gamma += &other.gamma;
        self.beta += &other.beta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn gradients_match_finite_differences() {
        let mut ln = LayerNorm::<f64>::new(4);
        ln.gamma = Array1::from_vec(vec![1.2, 0.7, -0.5, 1.0]);
        ln.beta = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let x = arr2(&[[0.5f64, -1.0, 2.0, 0.3], [1.5, 0.2, -0.7, -0.1]]);
        let gy = arr2(&[[0.3f64, -0.8, 0.5, 1.1], [0.9, 0.4, -0.2, 0.6]]);

        let (_, cache) = ln.forward(&x);
        let (gx, grads) = ln.backward(&cache, &gy);
        let loss = |ln: &LayerNorm<f64>, x: &Array2<f64>| (ln.forward(x).0 * &gy).sum();

        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = (loss(&ln, &xp) - loss(&ln, &xm)) / (2.0 * h);
                assert!(
                    (fd - gx[[i, j]]).abs() < 1e-6,
                    "gx[{i},{j}] fd {fd} vs {}",
                    gx[[i, j]]
                );
            }
        }
        for j in 0..4 {
            let mut lp = ln.clone();
            let mut lm = ln.clone();
            lp.gamma[j] += h;
            lm.gamma[j] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - grads.gamma[j]).abs() < 1e-6);
        }
    }
}
