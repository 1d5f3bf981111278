use std::path::PathBuf;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate mask: every entry is masked")]
    DegenerateMask,

    #[error("degenerate vector: norm {norm:e} is below tolerance")]
    DegenerateVector { norm: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 2 | configuration, shape, or validation problem |
    /// | 3 | I/O failure |
    /// | 4 | malformed or corrupted file |
    /// | 5 | training divergence |
    /// | 1 | anything else |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Shape(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_) | Error::Corruption(_) => 4,
            Error::Divergence { .. } => 5,
            _ => 1,
        }
    }
}
