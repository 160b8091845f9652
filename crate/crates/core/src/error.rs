use thiserror::Error;

/// Unified error type for trace I/O, synthesis, training, and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed binary container (bad magic, version, dtype, or length).
    #[error("format: {0}")]
    Format(String),

    /// Sidecar metadata that parses but fails validation.
    #[error("metadata: {0}")]
    Meta(String),

    /// Invalid parameter or parameter combination.
    #[error("config: {0}")]
    Config(String),

    /// Tensor shape mismatch in the autograd engine or model.
    #[error("shape: {0}")]
    Shape(String),

    /// Non-finite or out-of-range numeric values where finite ones are required.
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
