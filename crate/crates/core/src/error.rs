use thiserror::Error;

/// Unified error type for the core library.
///
/// The variants mirror the failure classes the public APIs can hit:
/// bad caller input, bad configuration, numerical blow-up during
/// integration or training, and container I/O problems.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Caller passed data that violates a documented precondition
    /// (dimension mismatch, out-of-range index, empty input, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A simulation or training run produced non-finite or unbounded
    /// values. The message carries the context (trajectory, step, ...).
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// Container or file format problem (bad magic, checksum mismatch,
    /// truncated payload, missing array).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        CoreError::InvalidInput(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        CoreError::InvalidConfig(msg.into())
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        CoreError::Divergence(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}
