use std::io;
use std::path::{Path, PathBuf};

use anchor_contrast::Error as CoreError;
use thiserror::Error;

/// Failures of a subcommand, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Verification(_) => 5,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(source) => CliError::Io {
                path: PathBuf::from("<stream>"),
                source,
            },
            CoreError::Csv(c) if c.is_io_error() => match c.into_kind() {
                csv::ErrorKind::Io(source) => CliError::Io {
                    path: PathBuf::from("<stream>"),
                    source,
                },
                _ => unreachable!("checked is_io_error"),
            },
            CoreError::NonFiniteLoss { .. }
            | CoreError::NonFinite(_)
            | CoreError::ZeroRow { .. }
            | CoreError::DegenerateDimension { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Attaches `path` to I/O failures of a core call that read or wrote it.
pub(crate) fn at_path(path: &Path) -> impl Fn(CoreError) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Io { source, .. } => CliError::io(path, source),
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}
