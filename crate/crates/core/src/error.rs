//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on shape.
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input data.
    #[error("data error: {0}")]
    Data(String),

    /// Unparsable cell while loading a CSV file. Rows and columns are 1-based,
    /// counting the header as row 1.
    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Training(String),

    /// An invariant the code guarantees was observed broken.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 data/checkpoint,
    /// 4 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } => 3,
            Error::Json(_) => 3,
            Error::Training(_) | Error::Internal(_) => 4,
        }
    }
}
