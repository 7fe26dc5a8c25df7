//! Minimal neural-network layers with hand-written backward passes.
//!
//! Everything here is single-threaded and deterministic: forward passes
//! return explicit caches, backward passes return gradients with respect to
//! both inputs and parameters. Batching is done by the callers (per-sample
//! passes, gradients summed in sample order), which keeps results independent
//! of any outer parallelism.

pub mod act;
pub mod adam;
pub mod attention;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;

pub use act::{silu, silu_backward};
pub use adam::Adam;
pub use attention::{attention, attention_backward, AttnCache, StreamKv, StreamKvGrads};
pub use conv::{AvgPool2, Conv2d, Conv2dGrads, MaxPool2, Upsample2};
pub use init::Initializer;
pub use linear::{Linear, LinearGrads};
pub use norm::{LayerNorm, LayerNormGrads};

use crate::num::Real;

/// Accumulate `src` into `dst` elementwise (same length).
pub fn add_assign_slice<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Scale a flat slice in place.
pub fn scale_slice<T: Real>(dst: &mut [T], factor: T) {
    for d in dst.iter_mut() {
        *d *= factor;
    }
}
