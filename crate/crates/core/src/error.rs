use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate symbol {0:?}")]
    DuplicateSymbol(String),

    #[error("capacity exceeded: {what} holds at most {capacity}, requested {requested}")]
    CapacityExceeded {
        what: &'static str,
        capacity: usize,
        requested: usize,
    },

    #[error("unknown symbol {codepoint} at position {position}")]
    UnknownSymbol { codepoint: String, position: usize },

    #[error("invalid phoneme index {index} (inventory capacity {capacity})")]
    InvalidPhoneme { index: usize, capacity: usize },

    #[error("unknown speaker {0}")]
    UnknownSpeaker(usize),

    #[error("unknown language {0:?}")]
    UnknownLanguage(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("degenerate attention: normalizer vanished at decoder step {step}")]
    DegenerateAttention { step: usize },

    #[error("alignment row {row} is not on the simplex (sum {sum}, min {min})")]
    AlignmentNotSimplex { row: usize, sum: f64, min: f64 },

    #[error("non-invertible voice transform for speaker {speaker}: zero gain in channel {channel}")]
    NonInvertibleTransform { speaker: usize, channel: usize },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),

    #[error("truncated tensor in {path}: expected {expected} bytes, found {found}")]
    TruncatedTensor {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes surfaced by the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Validation,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config-error",
            ErrorCategory::Io => "io-error",
            ErrorCategory::Validation => "validation-error",
            ErrorCategory::Numeric => "numeric-error",
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::VersionMismatch { .. } => ErrorCategory::Config,
            Error::Io { .. }
            | Error::MalformedHeader { .. }
            | Error::ChecksumMismatch(_)
            | Error::TruncatedTensor { .. }
            | Error::Json(_) => ErrorCategory::Io,
            Error::DegenerateAttention { .. }
            | Error::AlignmentNotSimplex { .. }
            | Error::Numeric(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Validation,
        }
    }
}
