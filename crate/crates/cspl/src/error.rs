use std::path::PathBuf;

use cspl_core::RunAborted;

use crate::protocol::ProtocolError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] cspl_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file whose content could not be parsed.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Aborted(#[from] RunAborted),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 1 for bad input or configuration, 2 when the
    /// detector backend failed or broke the protocol.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(e) => core_exit_code(e),
            Error::Aborted(a) => core_exit_code(&a.error),
            Error::Protocol(p) if p.is_validation() => 1,
            Error::Protocol(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Config(_) => 1,
        }
    }
}

fn core_exit_code(e: &cspl_core::Error) -> u8 {
    match e {
        cspl_core::Error::Backend(_) => 2,
        _ => 1,
    }
}
