use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("registration diverged after {iterations} iterations")]
    Diverged { iterations: usize },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("render state mismatch: {0}")]
    StateMismatch(String),

    #[error("no pixels left after masking")]
    EmptyPixelSet,

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("cannot parse calibration {}: {msg}", path.display())]
    CalibrationParse { path: PathBuf, msg: String },

    #[error("malformed LiDAR scan {}: {len} bytes is not a multiple of 16", path.display())]
    MalformedScan { path: PathBuf, len: usize },

    #[error("bad magic in {}: expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("truncated file {}: {msg}", path.display())]
    TruncatedFile { path: PathBuf, msg: String },

    #[error("malformed file {}: {msg}", path.display())]
    Malformed { path: PathBuf, msg: String },

    #[error("io failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec failure on {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("trajectory length mismatch: {estimated} estimated vs {reference} reference")]
    LengthMismatch { estimated: usize, reference: usize },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(&'static str),

    #[error("image too small: minimum dimension {min} < {required}")]
    TooSmall { min: usize, required: usize },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn dims(
        what: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
