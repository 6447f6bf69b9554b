use thiserror::Error;

/// Errors produced by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate weight: |w + dw| = {0:e} is below the degeneracy threshold")]
    DegenerateWeight(f64),

    #[error("invalid quantizer parameters: {0}")]
    InvalidParams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("enumeration over {0} entries refused (limit is {limit})", limit = crate::analysis::MAX_ORACLE_LEN)]
    EnumerationTooLarge(usize),

    #[error("layer {0} has no quantization parameters")]
    MissingQuantParams(usize),

    #[error("calibration diverged in segment {segment} at iteration {iter}: {detail}")]
    Diverged {
        segment: usize,
        iter: usize,
        detail: String,
    },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checksum mismatch for blob `{0}`")]
    ChecksumMismatch(String),

    #[error("truncated blob `{name}`: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("malformed artifact: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
