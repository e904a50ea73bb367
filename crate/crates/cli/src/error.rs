use std::fmt;
use std::path::{Path, PathBuf};

use planar_mrf::Error as CoreError;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 1,
    Io = 2,
    Numerical = 3,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn label(self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::Io => "io",
            Self::Numerical => "numerical",
        }
    }
}

/// A command failure, printed as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub path: Option<PathBuf>,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Config,
            path: None,
            message: msg.into(),
        }
    }

    pub fn config_at(path: &Path, msg: impl Into<String>) -> Self {
        Self {
            path: Some(path.to_path_buf()),
            ..Self::config(msg)
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            kind: ExitKind::Io,
            path: Some(path.to_path_buf()),
            message: err.to_string(),
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Io,
            path: Some(path.to_path_buf()),
            message: msg.into(),
        }
    }

    pub fn image(path: &Path, err: image::ImageError) -> Self {
        match err {
            image::ImageError::IoError(e) => Self::io(path, e),
            e => Self::format(path, e.to_string()),
        }
    }

    /// Single-line JSON for machine consumption.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind.label(),
            "path": self.path.as_ref().map(|p| p.display().to_string()),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{}: {}", p.display(), self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config(_) | CoreError::Domain(_) => ExitKind::Config,
            CoreError::Io(_) | CoreError::Format(_) => ExitKind::Io,
            CoreError::NonFinite { .. } | CoreError::Numerical(_) | CoreError::Evaluation(_) => ExitKind::Numerical,
        };
        Self {
            kind,
            path: None,
            message: e.to_string(),
        }
    }
}
