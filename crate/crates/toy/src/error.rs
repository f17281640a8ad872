use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error(transparent)]
    Core(#[from] voxmatch_core::Error),
    #[error("invalid toy config: {0}")]
    Config(String),
    #[error("non-finite loss{}", match .step { Some(s) => format!(" at step {s}"), None => String::new() })]
    NonFiniteLoss { step: Option<usize> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a toy checkpoint")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: malformed checkpoint: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl ToyError {
    /// Numerical failures, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            ToyError::Core(e) => e.is_numerical(),
            ToyError::NonFiniteLoss { .. } => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ToyError>;
