use std::path::PathBuf;

use thiserror::Error;
use uwdt_core::Error as CoreError;

/// Exit codes:
///
/// | code | category          |
/// |------|-------------------|
/// | 0    | success           |
/// | 1    | internal          |
/// | 2    | usage (bad flags) |
/// | 3    | config            |
/// | 4    | missing artifact  |
/// | 5    | corrupt artifact  |
/// | 6    | diverged          |
/// | 7    | i/o               |
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing input artifact {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Missing(_) => "missing-artifact",
            CliError::Core(e) => match e {
                CoreError::Format(_) => "corrupt-artifact",
                CoreError::ConfigMismatch(_) | CoreError::InvalidArgument(_) => "config",
                CoreError::Diverged { .. } => "diverged",
                CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing-artifact",
                CoreError::Io { .. } => "io",
                _ => "internal",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 3,
            "missing-artifact" => 4,
            "corrupt-artifact" => 5,
            "diverged" => 6,
            "io" => 7,
            _ => 1,
        }
    }
}
