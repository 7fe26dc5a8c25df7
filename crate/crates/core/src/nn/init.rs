//! Seeded parameter initialization.

use crate::num::{c, Real};
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Draws parameters from a dedicated RNG stream; all sampling goes through
/// `f64` so the drawn values agree across scalar types up to rounding.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Initializer { rng }
    }

    fn normal<T: Real>(&mut self, std: f64) -> T {
        let z: f64 = self.rng.sample(StandardNormal);
        c::<T>(z * std)
    }

    /// Dense weight, variance scaled by fan-in.
    pub fn dense<T: Real>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        let std = (1.0 / rows as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || self.normal(std))
    }

    /// Convolution kernel `(out_c, in_c, kh, kw)`, Kaiming-style scale.
    pub fn conv<T: Real>(&mut self, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Array4<T> {
        let fan_in = (in_c * kh * kw) as f64;
        let std = (2.0 / fan_in).sqrt();
        Array4::from_shape_simple_fn((out_c, in_c, kh, kw), || self.normal(std))
    }

    pub fn zeros1<T: Real>(&mut self, n: usize) -> Array1<T> {
        Array1::zeros(n)
    }
}
