//! Crate-wide error type.
//!
//! Errors are grouped by how the CLI must report them: config errors (exit 2,
//! message names the offending field) versus runtime errors (exit 3).

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A contract violation on an operation input (bad k, empty vector, ...).
    InvalidArgument(String),
    /// A configuration problem; `field` names the offending key.
    Config { field: String, message: String },
    /// Dataset I/O or integrity failure tied to one scene.
    Dataset { scene: Option<usize>, message: String },
    /// Checkpoint serialization/deserialization failure.
    Checkpoint(String),
    /// A loss part became non-finite during training.
    NonFinite { scene: usize, part: &'static str },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config { field, message } => write!(f, "config error: {field}: {message}"),
            Error::Dataset { scene: Some(id), message } => {
                write!(f, "dataset error: scene {id}: {message}")
            }
            Error::Dataset { scene: None, message } => write!(f, "dataset error: {message}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::NonFinite { scene, part } => {
                write!(f, "non-finite loss part '{part}' on scene {scene}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error: 2 for config problems, 3 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            _ => 3,
        }
    }
}
