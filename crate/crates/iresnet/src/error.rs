use std::path::PathBuf;

/// Errors surfaced by the file formats and commands. Each maps onto a
/// process exit code through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: byte offset {offset}: {message}")]
    Binary {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] iresnet_core::Error),
    /// A check ran to completion and did not pass.
    #[error("{0}")]
    Failed(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Failed(_) | Self::Core(iresnet_core::Error::NonFinite(_)) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
