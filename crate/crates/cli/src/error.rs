use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced to the command line, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("malformed raster: {0}")]
    MalformedRaster(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] sketchguide::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::UnknownKey(_) => 3,
            Self::MissingCheckpoint(_) => 4,
            Self::MalformedRaster(_) | Self::Core(sketchguide::Error::Raster(_)) => 5,
            Self::Config(_) => 6,
            Self::Core(_) | Self::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            3 => "unknown_key",
            4 => "missing_checkpoint",
            5 => "malformed_raster",
            6 => "bad_config",
            _ => "failure",
        }
    }

    /// `error kind=<kind> code=<n>: <message>` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error kind={} code={}: {msg}", self.kind(), self.exit_code())
    }
}
