use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("invalid architecture spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("model file format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("model file truncated: JSON ends after {found} bytes")]
    TruncatedFile { found: usize },

    #[error("model payload checksum mismatch: header {expected:08x}, payload {found:08x}")]
    ChecksumMismatch { expected: u32, found: u32 },

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("missing quantization parameters for tensor `{0}`")]
    MissingQuantParams(String),

    #[error("calibration stream is empty")]
    EmptyCalibrationStream,

    #[error("point at infinity: homography denominator {0:e}")]
    PointAtInfinity(f64),

    #[error("homography is singular (det {0:e})")]
    SingularHomography(f64),

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("no HPatches sequence could be loaded from {0}")]
    NoSequences(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            dim,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
