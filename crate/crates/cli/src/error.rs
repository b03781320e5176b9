use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] calibratemix::Error),

    #[error("unknown arm {0:?}; known arms: {known}", known = crate::arms::names().join(", "))]
    UnknownArm(String),

    #[error("{0}")]
    Usage(String),

    #[error("{} run(s) failed: {}", failures.len(), failures.join("; "))]
    Failed { failures: Vec<String> },
}
