use thiserror::Error;

/// Errors produced while decoding a serialized model container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("bad magic bytes (not a model container)")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("container truncated while reading {field}")]
    Truncated { field: String },
    #[error("tensor {name}: unknown dtype tag {tag}")]
    BadDtype { name: String, tag: u8 },
    #[error("tensor {name}: payload length {got} does not match dims ({expected})")]
    PayloadMismatch {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("config block is not valid: {0}")]
    BadConfig(String),
    #[error("checksum mismatch (container corrupted)")]
    ChecksumMismatch,
    #[error("model parameters do not match config: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad sample rate, unknown variant, bad dims).
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid input data (non-finite values, malformed audio).
    #[error("input error: {0}")]
    Input(String),
    /// An operation was called outside its contract (shape mismatch, wrong variant).
    #[error("contract error: {0}")]
    Contract(String),
    /// Non-finite value surfaced mid-computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training diverged.
    #[error("training error at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },
    #[error("load error: {0}")]
    Load(#[from] LoadError),
    #[error("io error")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
