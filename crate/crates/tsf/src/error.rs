use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TsfError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] tsf_core::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid container: {0}")]
    Container(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: u64, what: String },
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, TsfError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TsfError {
    let path = path.into();
    move |source| TsfError::Io { path, source }
}
