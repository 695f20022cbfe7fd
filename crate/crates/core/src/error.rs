use std::io;
use std::path::PathBuf;

/// Errors raised anywhere in the funnel stack.
///
/// The CLI maps the variants onto distinct exit codes, see [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty attention row")]
    EmptyAttentionRow,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 usage, 3 input, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Input(_) | Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint(_) => 3,
            Error::Shape(_) | Error::EmptyAttentionRow | Error::Csv(_) => 4,
        }
    }
}
