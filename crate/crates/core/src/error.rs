use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DuplexError>;

#[derive(Debug, Error)]
pub enum DuplexError {
    #[error("{op}: shape {left:?} incompatible with {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checksum mismatch for {}: manifest {expected}, file {actual}", .path.display())]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("unknown {kind} {name:?}")]
    UnknownPrimitive { kind: &'static str, name: String },

    #[error("manifest declares dim {manifest} but {} has {header} columns", .path.display())]
    HeaderDimMismatch {
        path: PathBuf,
        manifest: usize,
        header: usize,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("degenerate vector in {0}: zero norm before normalization")]
    Degenerate(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("composition ({state}, {object}) is not a seen training pair")]
    UnseenLabel { state: usize, object: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown id {0}")]
    UnknownId(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DuplexError {
    /// Short snake_case tag used by the CLI's `error=<kind>` line.
    pub fn kind(&self) -> &'static str {
        match self {
            DuplexError::DimensionMismatch { .. } => "dimension_mismatch",
            DuplexError::InvalidArgument(_) => "invalid_argument",
            DuplexError::Config(_) => "config",
            DuplexError::MissingFile(_) => "missing_file",
            DuplexError::ChecksumMismatch { .. } => "checksum_mismatch",
            DuplexError::UnknownPrimitive { .. } => "unknown_primitive",
            DuplexError::HeaderDimMismatch { .. } => "header_dim_mismatch",
            DuplexError::Parse { .. } => "parse",
            DuplexError::BadMagic { .. } => "bad_magic",
            DuplexError::Truncated(_) => "truncated",
            DuplexError::VersionMismatch { .. } => "version_mismatch",
            DuplexError::Degenerate(_) => "degenerate",
            DuplexError::NonFinite(_) => "non_finite",
            DuplexError::UnseenLabel { .. } => "unseen_label",
            DuplexError::Empty(_) => "empty",
            DuplexError::UnknownId(_) => "unknown_id",
            DuplexError::Io(_) => "io",
        }
    }
}
