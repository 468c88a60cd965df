use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unknown flags, missing arguments and the like.
    #[error("{0}")]
    Usage(String),

    /// A parameter failed validation; nothing was read or written.
    #[error("{message}")]
    Invalid { kind: &'static str, message: String },

    #[error(transparent)]
    Core(#[from] layerfuse_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad record in a JSONL or JSON input.
    #[error("{path}:{line}: {message}")]
    Input {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError::Invalid {
            kind: "config",
            message: message.into(),
        }
    }

    /// Validation-phase wrapper that keeps the library's error kind.
    pub fn rejected(e: layerfuse_core::Error) -> Self {
        CliError::Invalid {
            kind: e.kind(),
            message: e.to_string(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, line: usize, message: impl Into<String>) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Invalid { kind, .. } => kind,
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Input { .. } => "input",
        }
    }

    /// 2 for problems with the invocation, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Invalid { .. } => 2,
            _ => 1,
        }
    }
}
