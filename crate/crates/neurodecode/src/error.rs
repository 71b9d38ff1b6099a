use std::path::{Path, PathBuf};

use neurodecode_core::Error as CoreError;

/// Problems found while reading one of the on-disk formats.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: missing required key {key}")]
    MissingKey { key: String, line: usize },
    #[error("line {line}: unsupported {key}={value}")]
    Unsupported { key: String, value: String, line: usize },
    #[error("line {line}: channel {index} defined twice")]
    DuplicateChannel { index: usize, line: usize },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{len} bytes is not a whole number of {channels}-channel float32 samples")]
    Truncated { len: usize, channels: usize },
    #[error("data file holds no samples")]
    NoSamples,
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

impl FormatError {
    pub fn in_file(self, file: impl AsRef<Path>) -> Error {
        Error::Format {
            file: file.as_ref().to_path_buf(),
            source: self,
        }
    }
}

/// Errors surfaced by the command-line tool.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", file.display())]
    Format { file: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: integrity check failed: {detail}", path.display())]
    Integrity { path: PathBuf, detail: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    /// Process exit status: 1 for bad configuration, 2 for bad or
    /// missing data, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Core(CoreError::Config(_)) => 1,
            Error::Core(CoreError::Numerical { .. }) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
