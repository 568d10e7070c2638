use std::path::PathBuf;

/// Errors surfaced by the library and mapped to exit codes by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("codec failure: {0}")]
    Codec(String),

    /// A caller broke a documented precondition (shape, range, colour space).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{0}")]
    Data(String),

    #[error("training diverged at step {step}: non-finite {term}; state saved to {}", checkpoint.display())]
    Diverged {
        step: u64,
        term: String,
        checkpoint: PathBuf,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns a [`Error::Contract`] unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
