use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants mirror the failure classes the public API can produce:
/// shape/axis problems are `Dim`/`Index`, user-facing setup problems are
/// `Config`, misuse of a stateful API (folding twice, matrixizing a
/// normalized block) is `State`, tiny-instance guards raise `Capacity`,
/// ill-conditioned numerics raise `Numeric`, and file decoding raises
/// `Format` with enough context to locate the bad bytes.
#[derive(Debug, Error)]
pub enum DttnError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DttnError>;

impl DttnError {
    /// Process exit code for the CLI: 2 for usage/config problems, 3 for
    /// data/format problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DttnError::Config(_) => 2,
            DttnError::Format(_) | DttnError::Io(_) => 3,
            _ => 1,
        }
    }
}
