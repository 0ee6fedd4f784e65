use std::path::{Path, PathBuf};

use serde_json::json;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] word4per_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("image {what}: {message}")]
    Image { what: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl AppError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(_) => "core",
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Config(_) => "config",
            Self::Format { .. } => "format",
            Self::Image { .. } => "image",
            Self::Usage(_) => "usage",
        }
    }

    /// Process exit status: 2 for bad invocations or configs, 3 for bad input
    /// files, 4 for filesystem failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Parse { .. } | Self::Format { .. } | Self::Image { .. } => 3,
            Self::Io { .. } => 4,
            Self::Core(_) => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({
            "kind": self.kind(),
            "message": self.to_string(),
        });
        match self {
            Self::Config(violations) => body["violations"] = json!(violations),
            Self::Parse { path, line, .. } => {
                body["path"] = json!(path.display().to_string());
                body["line"] = json!(line);
            }
            Self::Io { path, .. } | Self::Format { path, .. } => {
                body["path"] = json!(path.display().to_string());
            }
            _ => {}
        }
        json!({ "error": body })
    }
}
