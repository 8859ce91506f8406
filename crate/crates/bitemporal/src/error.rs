use std::path::{Path, PathBuf};

/// Errors from files and formats, on top of the core errors.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint format version {found} is not supported (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Core(#[from] bitemporal_core::Error),
}

impl IoError {
    pub fn file(path: &Path, source: std::io::Error) -> Self {
        Self::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub type IoResult<T> = std::result::Result<T, IoError>;
