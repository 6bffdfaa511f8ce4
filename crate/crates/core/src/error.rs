use std::path::PathBuf;

use lumen_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum LumenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("object placement failed after {attempts} attempts")]
    Placement { attempts: usize },
    #[error("probe: {0}")]
    Probe(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LumenError>;

impl LumenError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: &'static str, detail: impl std::fmt::Display) -> Self {
        Self::Format { what, detail: detail.to_string() }
    }
}
