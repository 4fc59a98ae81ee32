use std::path::PathBuf;

/// Crate-wide error type.
///
/// The variants map 1:1 onto the CLI exit codes: `Parameter` and `Config`
/// exit 1 (usage), `Data` and `Io` exit 2, `Numeric` exits 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value surfaced where the numerics require finite ones.
    /// The message names the offending term or layer.
    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: 1 usage, 2 data, 3 numeric fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
