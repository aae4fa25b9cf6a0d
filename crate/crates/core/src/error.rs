use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: u32 },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model is already obfuscated")]
    AlreadyObfuscated,

    #[error("session {0} was already used; pads are one-time")]
    PadReuse(u64),

    #[error("session {0} not found or in the wrong state")]
    BadSessionState(u64),

    #[error("pad pool exhausted")]
    PadExhausted,

    #[error("sparse row invalid: {0}")]
    InvalidSparseRow(String),

    #[error("file format error: {0}")]
    FileFormat(String),

    #[error("fingerprint mismatch: secret {secret:#018x} vs model {model:#018x}")]
    FingerprintMismatch { secret: u64, model: u64 },

    #[error("blackbox baseline required to compute relative accuracy")]
    MissingBaseline,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
