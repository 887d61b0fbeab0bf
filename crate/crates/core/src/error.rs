use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("operation not defined for {0} descriptors")]
    Kind(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("place id {got} must be greater than the last inserted id {last}")]
    Order { got: u64, last: u64 },

    #[error("database is empty")]
    EmptyDatabase,

    #[error("unsupported database file: {0}")]
    Version(String),

    #[error("{scans} scans but {poses} poses")]
    Alignment { scans: usize, poses: usize },
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.into(),
            source,
        }
    }
}
