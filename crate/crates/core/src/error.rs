use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything the library can fail with.
///
/// Variants are grouped by [`ErrorClass`] so front ends can map them to
/// stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected \"{}\", found \"{}\"", .expected.escape_ascii(), .found.escape_ascii())]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("malformed sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate id {id}")]
    DuplicateId { id: u64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("label {label} is not among the active prototype columns")]
    InactiveLabel { label: usize },
    #[error("top-k partials are inconsistent: {0}")]
    Coverage(String),
}

/// Coarse failure classes; each maps to one process exit code in the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Precondition,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Sidecar { .. }
            | Error::ZeroRow { .. }
            | Error::DuplicateId { .. }
            | Error::NonFinite(_) => ErrorClass::Validation,
            Error::Shape(_)
            | Error::InvalidParameter(_)
            | Error::InactiveLabel { .. }
            | Error::Coverage(_) => ErrorClass::Precondition,
        }
    }
}
