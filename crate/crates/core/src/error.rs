use thiserror::Error;

#[derive(Debug, Error)]
pub enum PtdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File { path: std::path::PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PtdError>;

/// Attaches the path to an I/O failure.
pub fn file_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> PtdError + '_ {
    move |source| PtdError::File { path: path.to_path_buf(), source }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> PtdError {
    PtdError::Shape {
        op,
        detail: detail.into(),
    }
}
