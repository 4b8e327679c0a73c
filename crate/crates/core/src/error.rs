use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: widths, ratios, schedules, kernel sizes.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Bad input values (non-finite tensors, out-of-range labels, empty images).
    #[error("validation error: {0}")]
    Validation(String),

    /// Teacher/student attention maps do not line up.
    #[error("alignment error at block {block}: {message}")]
    Alignment { block: usize, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line harness.
    ///
    /// | code | meaning                                   |
    /// |------|-------------------------------------------|
    /// | 2    | configuration / usage error               |
    /// | 3    | validation error on data or tensors       |
    /// | 4    | I/O, image or checkpoint failure          |
    /// | 5    | training failure (non-finite loss)        |
    /// | 6    | internal invariant violated               |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Alignment { .. } => 2,
            Error::Shape(_) | Error::Validation(_) | Error::Dataset(_) => 3,
            Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 4,
            Error::NonFiniteLoss { .. } => 5,
            Error::Internal(_) => 6,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Checkpoint(format!("json: {e}"))
    }
}
