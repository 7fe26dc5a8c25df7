//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by corpus generation, training, sampling, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("model is not calibrated: call calibrate_far before verify")]
    Uncalibrated,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("unknown vocabulary words in prompt: {words:?}; known vocabulary: {vocabulary}")]
    OutOfVocabulary { words: Vec<String>, vocabulary: String },

    #[error("checkpoint format error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
