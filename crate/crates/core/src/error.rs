use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, flags, or arguments that violate an operation's preconditions.
    Validation,
    /// Filesystem failures and malformed or corrupted input files.
    Io,
    /// An engine invariant was violated; always a bug.
    Internal,
}

#[derive(Debug, Error)]
pub enum KecoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input: {0}")]
    Format(String),

    // pack ingest
    #[error("record {id}: dimension {found} does not match pack dimension {expected}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("record {0}: zero-norm vector")]
    ZeroNormVector(String),
    #[error("record {0}: non-finite value in vector")]
    NonFiniteValue(String),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {id}: unknown label {label:?}")]
    UnknownRecordLabel { id: String, label: String },
    #[error("blob size mismatch: expected {expected} bytes, found {found}")]
    BlobSizeMismatch { expected: usize, found: usize },
    #[error("unknown id {0}")]
    UnknownId(String),

    // snapshots
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated snapshot: {0}")]
    Truncated(String),
    #[error("checksum failure: stored {stored:016x}, computed {computed:016x}")]
    ChecksumFailure { stored: u64, computed: u64 },

    // coreset / init
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("coreset size {size} is not divisible by class count {classes}")]
    UnevenQuota { size: usize, classes: usize },
    #[error("class {label:?} has {available} samples, quota is {quota}")]
    InsufficientClassSamples { label: String, available: usize, quota: usize },
    #[error("stream ended before class {label:?} reached its quota ({filled}/{quota})")]
    InsufficientStream { label: String, filled: usize, quota: usize },
    #[error("contribution matrix does not match pack: {0}")]
    ScoreIdMismatch(String),
    #[error("non-finite contribution score for {0}")]
    NonFiniteScore(String),

    // engine / retrieval
    #[error("no coreset entry for class {0:?}")]
    NoTargetForClass(String),
    #[error("requested {shots} shots but coreset holds {size} entries")]
    ShotCountExceedsCoreset { shots: usize, size: usize },
    #[error("prompt assembly needs at least 4 classes, found {0}")]
    InsufficientChoices(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl KecoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KecoError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use KecoError::*;
        match self {
            Io { .. }
            | Format(_)
            | DimensionMismatch { .. }
            | ZeroNormVector(_)
            | NonFiniteValue(_)
            | DuplicateId(_)
            | UnknownRecordLabel { .. }
            | BlobSizeMismatch { .. }
            | UnsupportedVersion(_)
            | Truncated(_)
            | ChecksumFailure { .. } => ErrorKind::Io,
            Internal(_) => ErrorKind::Internal,
            _ => ErrorKind::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, KecoError>;
