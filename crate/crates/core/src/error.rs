use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate block: {0}")]
    DegenerateBlock(String),

    #[error("empty region [{lo}, {hi})")]
    EmptyRegion { lo: f64, hi: f64 },

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("incompatible codebooks: {0}")]
    IncompatibleCodebooks(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt-data: {0}")]
    CorruptData(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
