//! Small face-recognition embedders: a zoo of architecturally diverse CNNs,
//! cosine identity similarity, and verification-threshold calibration at a
//! fixed false-acceptance rate.

pub mod net;
pub mod train;

pub use net::{ArchId, FrModel, PoolKind, EMBED_DIM};
pub use train::{
    calibrate_far, impostor_pairs, impostor_score_correlation, measured_far, train_fr,
    TrainFrConfig,
};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::num::{c, Real};
use ndarray::Array1;

/// Unit-norm identity embedding. The constructor rejects vectors whose norm
/// deviates from 1 by more than `1e-6`; [`IdentityEmbedding::normalize`]
/// builds one from an arbitrary nonzero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding<T: Real>(Array1<T>);

impl<T: Real> IdentityEmbedding<T> {
    pub fn new(vector: Array1<T>) -> Result<Self> {
        let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
        if (norm - T::one()).abs() > c::<T>(1e-6) {
            return Err(Error::Numeric(format!(
                "identity embedding norm {norm} deviates from 1"
            )));
        }
        Ok(IdentityEmbedding(vector))
    }

    pub fn normalize(vector: Array1<T>) -> Result<Self> {
        let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm <= T::zero() || !norm.is_finite() {
            return Err(Error::Numeric("cannot normalize zero/non-finite vector".into()));
        }
        Ok(IdentityEmbedding(vector.mapv(|v| v / norm)))
    }

    pub fn vector(&self) -> &Array1<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine identity similarity: the dot product of two unit-norm embeddings,
/// in `[-1, 1]`. Non-unit inputs are unrepresentable by construction.
pub fn similarity<T: Real>(a: &IdentityEmbedding<T>, b: &IdentityEmbedding<T>) -> T {
    a.vector()
        .iter()
        .zip(b.vector().iter())
        .map(|(&x, &y)| x * y)
        .sum()
}

/// Outcome of a calibrated verification query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationDecision<T: Real> {
    pub similarity: T,
    pub threshold: T,
    pub matches: bool,
}

/// Compare two face images against the model's calibrated threshold.
/// The comparison is inclusive: similarity equal to the threshold matches.
pub fn verify<T: Real>(
    model: &FrModel<T>,
    a: &Image<T>,
    b: &Image<T>,
) -> Result<VerificationDecision<T>> {
    let threshold = model.threshold_far01.ok_or(Error::Uncalibrated)?;
    let sim = similarity(&model.embed(a)?, &model.embed(b)?);
    Ok(VerificationDecision {
        similarity: sim,
        threshold,
        matches: sim >= threshold,
    })
}
