use std::path::PathBuf;

/// Errors produced by the watermarking core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate direction: projected norm {norm:e} below 1e-12")]
    DegenerateDirection { norm: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid null statistics: {0}")]
    InvalidNulls(String),

    #[error("missing null statistics for feature {0}")]
    MissingNull(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("backend error: {0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
