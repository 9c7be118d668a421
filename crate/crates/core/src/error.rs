use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite loss at sigma = {sigma}")]
    NonFiniteLoss { sigma: f64 },

    #[error("non-finite score at sampler step {step}")]
    NonFiniteScore { step: usize },

    #[error("score norm is zero; corrector step size is undefined")]
    ZeroScore,

    #[error("backward called without a recorded forward pass")]
    EmptyTape,

    #[error("training diverged at iteration {iter}: loss {loss} exceeds {threshold}")]
    Divergence { iter: usize, loss: f64, threshold: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset not found at {path}")]
    MissingDataset { path: PathBuf },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("{path}: bad header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("trajectory {trajectory}, sampler step {step}: {source}")]
    Trajectory {
        trajectory: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::Io { .. } | Error::MalformedHeader { .. } | Error::Truncated { .. } => 3,
            Error::MissingDataset { .. } => 4,
            Error::Divergence { .. } | Error::NonFiniteLoss { .. } => 5,
            Error::Mismatch(_) | Error::Dimension(_) => 6,
            _ => 1,
        }
    }

    /// The innermost error, looking through trajectory context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Trajectory { source, .. } => source.root(),
            other => other,
        }
    }
}
