//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by simulation, training, and certification.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, invalid parameters, malformed configs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A rollout or cost evaluation produced a non-finite value.
    ///
    /// `step` is the time index inside the rollout; `sequence` is the
    /// noise-sequence index when the failure happened inside a dataset
    /// average.
    #[error("numerical divergence at step {step}{}: {what}", match sequence { Some(i) => format!(" (sequence {i})"), None => String::new() })]
    NonFinite {
        step: usize,
        sequence: Option<usize>,
        what: String,
    },

    /// A documented precondition of an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The Monte-Carlo partition-function estimate lost its positive
    /// lower bound; more prior samples are needed.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// Training aborted because the objective ran away from its best
    /// observed value.
    #[error("training diverged at iteration {iteration}: mean cost {current:.6} exceeds 10x the best observed mean {best:.6}")]
    Diverged {
        iteration: usize,
        current: f64,
        best: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed on-disk artifact (dataset/controller/config files).
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Attach a sequence index to a `NonFinite` error raised inside a
    /// per-sequence loop; other variants pass through unchanged.
    pub fn with_sequence(self, seq: usize) -> Self {
        match self {
            Error::NonFinite { step, what, .. } => Error::NonFinite {
                step,
                sequence: Some(seq),
                what,
            },
            other => other,
        }
    }

    /// Stable machine-readable tag for each variant (used by the CLI's
    /// error JSON).
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite",
            Error::Precondition(_) => "precondition",
            Error::InsufficientSamples(_) => "insufficient_samples",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Parse(_) => "parse",
        }
    }
}
