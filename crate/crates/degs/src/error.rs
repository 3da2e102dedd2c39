use std::path::{Path, PathBuf};

pub type Result<T, E = DegsError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DegsError {
    #[error(transparent)]
    Core(#[from] degs_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("dataset {path} is invalid: {}", .problems.join("; "))]
    Dataset { path: PathBuf, problems: Vec<String> },
    #[error("{0}")]
    Config(String),
}

impl DegsError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        DegsError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        DegsError::Format { path: path.as_ref().to_path_buf(), message: message.into() }
    }

    /// Stable machine-readable category for the CLI's JSON errors.
    pub fn kind(&self) -> &'static str {
        match self {
            DegsError::Core(e) => match e {
                degs_core::Error::Prerequisite(_) => "prerequisite",
                degs_core::Error::DimensionMismatch { .. } => "dimension_mismatch",
                degs_core::Error::Config(_) => "config",
                degs_core::Error::InvalidSequence(_) => "dataset",
                _ => "numeric",
            },
            DegsError::Io { .. } => "io",
            DegsError::Format { .. } => "format",
            DegsError::Version { .. } => "version",
            DegsError::Dataset { .. } => "dataset",
            DegsError::Config(_) => "config",
        }
    }
}
