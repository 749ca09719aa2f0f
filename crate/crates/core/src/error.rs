use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-positive disparity {0}")]
    NonPositiveDisparity(f64),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("homography sampling failed after {0} rejected samples")]
    SamplingFailed(usize),

    #[error("photometric alignment failed: {0}")]
    AlignFailed(String),

    #[error("dynamic filter unavailable: {0} exterior correspondences")]
    FilterUnavailable(usize),

    #[error("insufficient trajectory overlap: {0} associated poses")]
    InsufficientOverlap(usize),

    #[error("parse error in {context} at record {record}: {message}")]
    Parse {
        context: String,
        record: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, record: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            record,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
