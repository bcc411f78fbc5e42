use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HydraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HydraError {
    /// A configuration value failed validation. `line` points into the source
    /// file when the offending key could be located there.
    #[error("{}invalid value for `{key}`: {message}", line_prefix(*.line))]
    InvalidConfig { key: String, message: String, line: Option<usize> },

    #[error("{}{message}", line_prefix(*.line))]
    ConfigSyntax { message: String, line: Option<usize> },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write report: {0}")]
    Report(String),
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

impl HydraError {
    pub fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        HydraError::InvalidConfig { key: key.into(), message: message.into(), line: None }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HydraError::Io { path: path.into(), source }
    }

    /// True for errors caused by user configuration rather than the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(self, HydraError::InvalidConfig { .. } | HydraError::ConfigSyntax { .. } | HydraError::UnknownMethod(_))
    }
}
