//! Crate-wide error type with a stable exit-code mapping for the CLI.

use thiserror::Error;

/// Everything that can go wrong across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad field values, inconsistent dimensions,
    /// unknown feature names, malformed config files.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid input data: malformed datasets, media that cannot be decoded,
    /// empty inputs where content is required.
    #[error("input error: {0}")]
    Input(String),

    /// Filesystem failure wrapping the underlying cause.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Numeric failure during training or inference (non-finite loss,
    /// divergent optimization).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Remote generation client failure after retries were exhausted.
    #[error("client error: {0}")]
    Client(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn client(msg: impl Into<String>) -> Self {
        Error::Client(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// I/O-class failure that has no underlying [`std::io::Error`]
    /// (e.g. serialization on the way to a file).
    pub fn io_other(path: &std::path::Path, msg: impl Into<String>) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(msg.into()),
        }
    }

    /// Process exit code the CLI reports for this error class.
    ///
    /// 2 = configuration, 3 = runtime failure (input/io/numeric/client).
    /// Exit code 4 is reserved for partial completion of an evaluation run
    /// (some samples failed but the run finished) and is not an error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Input(_) | Error::Io { .. } | Error::Numeric(_) | Error::Client(_) => 3,
        }
    }

    /// Short machine-readable kind tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Io { .. } => "io",
            Error::Numeric(_) => "numeric",
            Error::Client(_) => "client",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for wrapping `std::io` results with the offending path.
pub fn io_ctx<T>(res: std::io::Result<T>, path: &std::path::Path) -> Result<T> {
    res.map_err(|e| Error::io(path.display().to_string(), e))
}
