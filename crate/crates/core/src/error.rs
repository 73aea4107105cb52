use std::path::PathBuf;

use serde::Serialize;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable is not recorded on this tape")]
    NotOnTape,

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("gradient check failed to evaluate at coordinate {index} of input {input}: {source}")]
    GradCheckEval {
        input: usize,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reads a whole text file, naming the path on failure.
pub(crate) fn read_text(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::NotOnTape => "not_on_tape",
            Error::TapeConsumed => "tape_consumed",
            Error::GradCheckEval { .. } => "gradcheck_eval",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Geometry(_) => "geometry",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Divergence { .. } => "divergence",
            Error::EmptyCorpus => "empty_corpus",
            Error::Undefined(_) => "undefined",
            Error::Io(_) | Error::File { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind(),
            message: self.to_string(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
}
