//! Smooth activation. SiLU keeps every gradient path differentiable, which
//! the finite-difference oracles rely on.

use crate::num::Real;
use ndarray::{Array, Dimension};

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `silu(x) = x * sigmoid(x)`.
pub fn silu<T: Real, D: Dimension>(x: &Array<T, D>) -> Array<T, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Backward of SiLU given the forward input.
pub fn silu_backward<T: Real, D: Dimension>(x: &Array<T, D>, gy: &Array<T, D>) -> Array<T, D> {
    let mut gx = x.mapv(|v| {
        let s = sigmoid(v);
        s * (T::one() + v * (T::one() - s))
    });
    gx.zip_mut_with(gy, |g, &gy| *g *= gy);
    gx
}
