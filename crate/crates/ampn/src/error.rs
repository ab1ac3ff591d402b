use ampn_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 bad arguments or input, 2 missing file, 3 shape or config mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(CoreError::MissingFile(_)) => 2,
            CliError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Core(CoreError::ShapeMismatch { .. } | CoreError::Config(_) | CoreError::Dimension(_)) => 3,
            _ => 1,
        }
    }
}
