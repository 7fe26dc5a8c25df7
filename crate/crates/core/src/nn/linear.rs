//! Dense layer acting on row-major token/feature matrices.

use crate::num::Real;
use ndarray::{Array1, Array2};

/// `y = x · w (+ b)`, with `x: (n, d_in)` and `w: (d_in, d_out)`.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub w: Array2<T>,
    pub b: Option<Array1<T>>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Real> {
    pub w: Array2<T>,
    pub b: Option<Array1<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(w: Array2<T>, b: Option<Array1<T>>) -> Self {
        Linear { w, b }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    /// Returns `(grad_x, grads)` given the forward input and output gradient.
    pub fn backward(&self, x: &Array2<T>, gy: &Array2<T>) -> (Array2<T>, LinearGrads<T>) {
        let gx = gy.dot(&self.w.t());
        let gw = x.t().dot(gy);
        let gb = self.b.as_ref().map(|_| gy.sum_axis(ndarray::Axis(0)));
        (gx, LinearGrads { w: gw, b: gb })
    }

    pub fn zero_grads(&self) -> LinearGrads<T> {
        LinearGrads {
            w: Array2::zeros(self.w.dim()),
            b: self.b.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }
}

impl<T: Real> LinearGrads<T> {
    pub fn add(&mut self, other: &LinearGrads<T>) {
        self.w += &other.w;
        if let (Some(b), Some(ob)) = (self.b.as_mut(), other.b.as_ref()) {
            *b += ob;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn gradients_match_finite_differences() {
        let w = arr2(&[[0.3f64, -0.2, 0.5], [0.1, 0.8, -0.4]]);
        let b = Array1::from_vec(vec![0.05f64, -0.1, 0.2]);
        let layer = Linear::new(w, Some(b));
        let x = arr2(&[[0.7f64, -1.2], [0.4, 0.9]]);
        let gy = arr2(&[[1.0f64, 0.5, -0.3], [-0.2, 0.8, 0.1]]);
        let (gx, grads) = layer.backward(&x, &gy);
        let loss = |layer: &Linear<f64>, x: &Array2<f64>| (layer.forward(x) * &gy).sum();

        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
                assert!((fd - gx[[i, j]]).abs() < 1e-7);
            }
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.w[[i, j]] += h;
                lm.w[[i, j]] -= h;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                assert!((fd - grads.w[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
