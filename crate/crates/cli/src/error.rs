use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] stride_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 usage or missing input, 3 data or shape, 4 numerical abort.
    pub fn exit_code(&self) -> u8 {
        use stride_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::UnknownStrategy { .. } => 2,
                E::ShapeMismatch { .. } | E::Format(_) | E::Io(_) => 3,
                E::NonFinite { .. } => 4,
            },
        }
    }
}
