use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZeusError {
    #[error(transparent)]
    Core(#[from] zeus_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("frozen-module audit failed: {0}")]
    Audit(String),
}

pub type Result<T, E = ZeusError> = std::result::Result<T, E>;

impl ZeusError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ZeusError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        ZeusError::Format { path: path.into(), detail: detail.into() }
    }

    /// `true` for problems with the request itself (bad flags, configs,
    /// shapes) as opposed to failures while carrying it out.
    pub fn is_validation(&self) -> bool {
        use zeus_core::Error as E;
        match self {
            ZeusError::Core(e) => matches!(
                e,
                E::Dimension { .. }
                    | E::Shape { .. }
                    | E::Config(_)
                    | E::Input(_)
                    | E::Parameter(_)
                    | E::Usage(_)
                    | E::ResizeRequired { .. }
                    | E::Contract(_)
            ),
            ZeusError::Json(_) => true,
            _ => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }
}

/// `fs::read` with the path attached to errors.
pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ZeusError::io(path, e))
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ZeusError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| ZeusError::io(path, e))
}
