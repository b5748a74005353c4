use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: type_id out of range: {type_id} not in [1, {num_types}]")]
    TypeOutOfRange {
        line: usize,
        type_id: i64,
        num_types: usize,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("loss must be a finite scalar: {0}")]
    BadLoss(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid Hawkes parameters: {0}")]
    Hawkes(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite objective at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("empty prediction set: every sequence has a single event")]
    NoPredictions,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::TypeOutOfRange { .. } => "type_out_of_range",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::BadLoss(_) => "bad_loss",
            Error::UnknownParam(_) => "unknown_param",
            Error::Hawkes(_) => "hawkes",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::NoPredictions => "no_predictions",
            Error::Json(_) => "json",
        }
    }
}
