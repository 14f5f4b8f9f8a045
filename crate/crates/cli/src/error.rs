use std::path::PathBuf;

use embalance::ErrorClass;

/// Process exit codes. Stable; documented in the README.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const VALIDATION: i32 = 4;
    pub const PRECONDITION: i32 = 5;
    pub const LOCKED: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] embalance::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Io => exit::IO,
                ErrorClass::Validation => exit::VALIDATION,
                ErrorClass::Precondition => exit::PRECONDITION,
            },
            CliError::Io { .. } => exit::IO,
            CliError::Parse { .. } | CliError::Validation(_) => exit::VALIDATION,
            CliError::Config(_) => exit::PRECONDITION,
            CliError::Locked(_) => exit::LOCKED,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
