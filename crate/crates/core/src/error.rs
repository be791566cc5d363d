use thiserror::Error;

#[derive(Debug, Error)]
pub enum FunctaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("digest mismatch: found {found}, expected {expected}")]
    Digest { found: String, expected: String },
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FunctaError>;
