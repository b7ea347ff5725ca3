//! Crate-wide error type.

use thiserror::Error;

/// Best transform found by RANSAC before it gave up; attached to
/// [`Error::RegistrationFailed`] so callers can inspect the attempt.
#[derive(Debug, Clone)]
pub struct BestAttempt {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub inlier_count: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("parse error at line {line}: {msg}")]
    ParseLine { line: usize, msg: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("checkpoint version mismatch: file has {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("parameter {name}: dimension mismatch (checkpoint {found:?}, model {expected:?})")]
    DimensionMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("unknown config key: {0}")]
    UnknownConfigKey(String),

    #[error("config value for {key}: {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("insufficient correspondences: need at least {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },

    #[error("registration failed: no hypothesis reached {min_inliers} inliers (best {})", best.inlier_count)]
    RegistrationFailed {
        min_inliers: usize,
        best: Box<BestAttempt>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn parse_line(line: usize, msg: impl Into<String>) -> Self {
        Error::ParseLine {
            line,
            msg: msg.into(),
        }
    }
}
