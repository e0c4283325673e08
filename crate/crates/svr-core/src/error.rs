use thiserror::Error;

/// Errors raised by the retargeting library.
///
/// `Dimension` and `Contract` signal caller mistakes (mismatched extents,
/// violated preconditions), `Numeric` signals non-finite values produced or
/// consumed by a kernel, `Ingestion` covers dataset/file problems, and
/// `Training` wraps a non-finite loss with the offending term named.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("training error: non-finite loss in term `{term}` ({value})")]
    Training { term: String, value: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn ingestion(msg: impl Into<String>) -> Self {
        Error::Ingestion(msg.into())
    }
}
