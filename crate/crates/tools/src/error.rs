use std::io;
use std::path::Path;

/// Command failure, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or unreadable/malformed input (exit 1).
    #[error("{0}")]
    Input(String),
    /// Anything else that went wrong while running (exit 2).
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn read(path: &Path, e: io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }

    pub fn write(path: &Path, e: io::Error) -> Self {
        CliError::Internal(format!("{}: {e}", path.display()))
    }
}

impl From<ccam_core::Error> for CliError {
    fn from(e: ccam_core::Error) -> Self {
        use ccam_core::Error as E;
        match e {
            E::Config(_) | E::Input(_) | E::Param(_) | E::Shape(_) | E::NoMovableObject => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
