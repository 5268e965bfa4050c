use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty model")]
    EmptyModel,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated stream: {0}")]
    Truncated(&'static str),
    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),
    #[error("NaN payload in tensor {0:?}")]
    NanPayload(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stream exhausted after {0} bits")]
    Exhausted(u64),
    #[error("invalid prefix at bit {0}")]
    InvalidPrefix(u64),
    #[error("symbol {0} absent from codebook")]
    SymbolAbsent(u32),
    #[error("policy length mismatch: expected {expected}, found {found}")]
    PolicyLengthMismatch { expected: usize, found: usize },
    #[error("missing policy entry for cell {0}")]
    MissingPolicyEntry(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no alternative value available for mutation: {0}")]
    NoAlternative(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: Box<Error> },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
