use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at '{path}': {message}")]
    Config { path: String, message: String },
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] fgakit::Error),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Self::MissingFile(path.to_path_buf())
        } else {
            Self::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::Config {
            path: String::new(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } | Self::Core(fgakit::Error::Config(_)) => "config",
            Self::MissingFile(_) => "missing-file",
            Self::Core(fgakit::Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => "missing-file",
            Self::Format(_) | Self::Core(fgakit::Error::Format(_) | fgakit::Error::Json(_)) => "format",
            _ => "runtime",
        }
    }

    /// Process exit status: 2 config, 3 missing file, 4 format or version,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "missing-file" => 3,
            "format" => 4,
            _ => 1,
        }
    }

    /// Machine-readable record printed on stderr.
    pub fn record(&self) -> serde_json::Value {
        let mut rec = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            Self::Config { path, .. } if !path.is_empty() => rec["key"] = json!(path),
            Self::MissingFile(p) => rec["file"] = json!(p.display().to_string()),
            _ => {}
        }
        rec
    }
}

pub type CliResult<T> = Result<T, CliError>;
