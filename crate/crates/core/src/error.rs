use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by the exit code the command-line front end maps them
/// to: numerical aborts are distinguishable from configuration mistakes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient requested for non-leaf node {0}")]
    NotALeaf(usize),

    #[error("gradient requested for constant leaf {0}")]
    NotDifferentiable(usize),

    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("missing parameter tensor `{0}`")]
    MissingTensor(String),

    #[error("numerical abort at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },

    #[error("missing input {what}: expected at {path}")]
    MissingInput { what: String, path: PathBuf },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors produced by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
