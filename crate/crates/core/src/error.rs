use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the analysis engines.
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {dtype} for tensor {tensor}: only BF16, F16, F32 and F64 are analyzed")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("tensor {0}: data offsets out of bounds or overlapping")]
    OffsetOutOfBounds(String),
    #[error("unknown tensor: {0}")]
    UnknownTensor(String),
    #[error("length mismatch: {left} vs {right} elements")]
    LengthMismatch { left: usize, right: usize },
    #[error("schema mismatch in {} tensor(s): {}", .offenders.len(), .offenders.join(", "))]
    SchemaMismatch { offenders: Vec<String> },
    #[error("invalid tolerances: {0}")]
    InvalidTolerance(String),
    #[error("empty mask: {0} has no updated parameters")]
    EmptyMask(&'static str),
    #[error("malformed mask file: {0}")]
    MalformedMask(String),
    #[error("tensor {name} is not a matrix (shape {shape:?})")]
    NotAMatrix { name: String, shape: Vec<usize> },
    #[error("checkpoint sequence is empty")]
    EmptySequence,
    #[error("at least one intermediate checkpoint is required to separate canceled from untouched parameters")]
    InsufficientCheckpoints,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("degenerate preference pair at example {0}: chosen equals rejected")]
    DegeneratePair(usize),
    #[error("gradient mask does not match the toy parameter schema: {0}")]
    MaskSchemaMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid pattern: {0}")]
    Pattern(#[from] regex::Error),
}

/// Coarse error classes, used by front ends to map errors onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Schema, format or contract violations in the input data.
    Data,
    /// Filesystem failures.
    Io,
    /// Bad parameters supplied by the caller.
    Usage,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::InvalidTolerance(_) | Error::Config(_) | Error::Pattern(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
