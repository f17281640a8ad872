use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the voxel-matching toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("voxel {index} has a feature norm below 1e-12")]
    ZeroFeature { index: usize },

    #[error("covariance is rank deficient (singular values {sigma:?})")]
    RankDeficient { sigma: [f64; 3] },

    #[error("singular values too close for a stable gradient (singular values {sigma:?})")]
    NearDegenerateSvd { sigma: [f64; 3] },

    #[error("proposal set is empty")]
    EmptyProposalSet,

    #[error("descriptor dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("camera intrinsics are singular")]
    SingularIntrinsics,

    #[error("zero-length vector")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: invalid value for `{key}`: {reason}")]
    InvalidValue { line: usize, key: String, reason: String },

    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated file ({reason})")]
    TruncatedFile { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {reason}")]
    Json { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical core (as opposed to bad data or usage).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateInput(_)
                | Error::ZeroFeature { .. }
                | Error::RankDeficient { .. }
                | Error::NearDegenerateSvd { .. }
                | Error::SingularIntrinsics
                | Error::ZeroVector
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
