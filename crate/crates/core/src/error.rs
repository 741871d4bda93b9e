use std::path::PathBuf;

use thiserror::Error;

use crate::gradcore::GradError;
use crate::tensor::ShapeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checksum mismatch for {what}: expected {expected}, found {found}")]
    Checksum {
        what: String,
        expected: String,
        found: String,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: String,
        found: u32,
        expected: u32,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("singular affine matrix (det = {0})")]
    Singular(f64),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
