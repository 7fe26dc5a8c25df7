//! Scalar abstraction: every numeric routine in the crate is generic over
//! [`Real`], implemented for `f32` and `f64`.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the pipeline.
pub trait Real:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Lift an `f64` constant into the working scalar type.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant not representable")
}
