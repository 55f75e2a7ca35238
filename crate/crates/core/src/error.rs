use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("timestep {t} out of range for schedule with {num_steps} steps")]
    TimestepOutOfRange { t: usize, num_steps: usize },

    #[error("unknown loss term `{0}`")]
    UnknownLoss(String),

    #[error("{location}: field `{field}`: {reason}")]
    Schema {
        location: String,
        field: String,
        reason: String,
    },

    #[error("missing file referenced by manifest: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("adapter `{name}`: {reason}")]
    Adapter { name: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad class of the failure, used by front-ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownLoss(_) | Error::Adapter { .. } => ErrorKind::Config,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::Schema { .. }
            | Error::MissingFile(_)
            | Error::EmptyDataset(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json(_) => ErrorKind::Data,
            Error::Shape { .. } | Error::InvalidArgument { .. } | Error::TimestepOutOfRange { .. } => {
                ErrorKind::Data
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
