use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad probability, non-positive size, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes or lengths that violate an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error in `{tensor}`: {detail}")]
    Numeric { tensor: String, detail: String },

    /// Timestep not owned by any shard of a decode shard table.
    #[error("dispatch error: timestep {t} is not covered by the shard table (T = {total})")]
    Dispatch { t: usize, total: usize },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
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
}
