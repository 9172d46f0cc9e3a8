//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("timestep {t} outside [0, 1]")]
    InvalidTimestep { t: f64 },

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cache state error: {0}")]
    CacheState(String),

    #[error("non-finite value in {context}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        context: &'static str,
        step: Option<usize>,
    },

    #[error("hash mismatch for {what}: expected {expected}, got {actual}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("sampling failed at step {step}: non-finite state")]
    SamplingFailure { step: usize },

    #[error("generation failed at block {block}: {source}")]
    Generation {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    /// Short machine-readable kind tag for the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidTimestep { .. } => "invalid_timestep",
            Error::Layout(_) => "layout",
            Error::Config(_) => "config",
            Error::CacheState(_) => "cache_state",
            Error::NonFinite { .. } => "non_finite",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Corpus(_) => "corpus",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training(_) => "training",
            Error::SamplingFailure { .. } => "sampling_failure",
            Error::Generation { .. } => "generation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Plot(_) => "plot",
        }
    }
}
