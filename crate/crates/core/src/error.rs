use std::path::PathBuf;

use thiserror::Error;

use crate::imaging::Rect;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("rect {rect} escapes {width}x{height} image")]
    RectOutOfBounds {
        rect: Rect,
        width: usize,
        height: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("unsupported color mode: {0}")]
    UnsupportedColorMode(String),

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("row {row}: unknown label {label:?}")]
    UnknownLabel { row: usize, label: String },

    #[error("row {row}: duplicate image id {id:?}")]
    DuplicateId { row: usize, id: String },

    #[error("missing image file for {id:?} under {dir}")]
    MissingFile { id: String, dir: PathBuf },

    #[error("class {0:?} has no members")]
    EmptyClass(String),

    #[error("input dimension mismatch: classifier expects {expected:?}, got {found:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("invalid class distribution: {0}")]
    InvalidDistribution(String),

    #[error("external classifier handshake failed: {0}")]
    Handshake(String),

    #[error("external classifier timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("external classifier: {0}")]
    External(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("covariance not positive definite: pivot {index} is {pivot:e}")]
    SingularCovariance { index: usize, pivot: f64 },

    #[error("ROI #{index} {rect} failed")]
    Roi {
        index: usize,
        rect: Rect,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: message.into(),
        }
    }
}
