use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion has zero norm")]
    DegenerateQuaternion,
    #[error("camera radius {radius} does not place the camera outside the unit scene sphere")]
    CameraInsideScene { radius: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in tensor data")]
    NonFinite,
    #[error("invalid backward pass: {0}")]
    InvalidBackward(String),
    #[error("timestep {t} outside 1..={max}")]
    InvalidTimestep { t: usize, max: usize },
    #[error("invalid solver step from {from} to {to}")]
    InvalidStep { from: usize, to: usize },
    #[error("denoiser checkpoint missing: {0}")]
    MissingModel(PathBuf),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical divergence: {0}")]
    Diverged(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
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
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
