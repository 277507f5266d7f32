use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u64),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("invalid JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Core(#[from] ofrnn_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit status: 3 for numerical divergence, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
