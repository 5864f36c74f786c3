use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header at byte {offset}: {msg}")]
    BadHeader { offset: usize, msg: String },

    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("coordinate {coord:?} out of bounds {dims:?}")]
    OutOfBounds { coord: Vec<i64>, dims: Vec<usize> },

    #[error("duplicate coordinate {0:?}")]
    DuplicateCoord(Vec<i64>),

    #[error("illegal convolution spec: {0}")]
    IllegalConv(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("coordinate mismatch: {0}")]
    CoordMismatch(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss term `{term}` at iteration {iteration} (value {value})")]
    NonFiniteLoss {
        term: &'static str,
        iteration: usize,
        value: f64,
    },

    #[error("checkpoint magic mismatch: found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("checkpoint digest mismatch")]
    DigestMismatch,

    #[error("checkpoint was written for a different configuration")]
    ConfigMismatch,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadHeader { .. } => "bad_header",
            Error::Truncated { .. } => "truncated",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::DuplicateCoord(_) => "duplicate_coord",
            Error::IllegalConv(_) => "illegal_conv",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::CoordMismatch(_) => "coord_mismatch",
            Error::UnknownClass(_) => "unknown_class",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::BadMagic(_) => "bad_magic",
            Error::BadVersion(_) => "bad_version",
            Error::DigestMismatch => "digest_mismatch",
            Error::ConfigMismatch => "config_mismatch",
        }
    }
}
