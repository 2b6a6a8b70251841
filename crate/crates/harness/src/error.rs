use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: splatmap::Error,
    },
    #[error(transparent)]
    Core(#[from] splatmap::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Process exit code: 2 for malformed input or configuration, 3 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse { .. } | HarnessError::Config(_) | HarnessError::MissingImage(_) | HarnessError::Read { .. } => 2,
            HarnessError::Invariant(_) | HarnessError::Write { .. } | HarnessError::Frame { .. } | HarnessError::Core(_) => 3,
        }
    }

    pub fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Write {
            path: path.into(),
            source,
        }
    }

    pub fn read(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Read {
            path: path.into(),
            source,
        }
    }
}
