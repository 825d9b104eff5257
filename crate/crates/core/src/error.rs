use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("rank-deficient light rig `{rig}`: condition number {cond:.3e} exceeds {max_cond:.3e}")]
    RankDeficient {
        rig: String,
        cond: f64,
        max_cond: f64,
    },

    #[error("malformed MVNT data: {0}")]
    Mvnt(String),

    #[error("calibration line {line}: {msg}")]
    Calibration { line: usize, msg: String },

    #[error("point is behind the camera (z_cam = {z})")]
    BehindCamera { z: f64 },

    #[error("undistortion did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },

    #[error("unsupported distortion model: {0}")]
    UnsupportedDistortion(String),

    #[error("model has not been trained")]
    Untrained,

    #[error("{0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
