//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum VioError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("bad configuration: {0}")]
    Config(String),

    #[error("frame dimensions {width}x{height} not divisible into 4x4 blocks")]
    BlockAlignment { width: usize, height: usize },

    #[error("frame dimensions {width}x{height} exceed maximum {max_width}x{max_height}")]
    FrameTooLarge {
        width: usize,
        height: usize,
        max_width: usize,
        max_height: usize,
    },

    #[error("compressed stream truncated or malformed: {0}")]
    Codec(String),

    #[error("track store full: all {capacity} payload slots in use")]
    TrackStoreFull { capacity: usize },

    #[error("track {0} not in store")]
    TrackNotFound(u64),

    #[error("hessian write to off-pattern block ({i}, {j})")]
    MaskedWrite { i: usize, j: usize },

    #[error("matrix not positive definite at pivot {index}")]
    NotPositiveDefinite { index: usize },

    #[error("non-positive imu sample interval {dt} s")]
    BadSampleInterval { dt: f64 },

    #[error("disparity {disparity} px at or below minimum {min} px, point too far")]
    TooFar { disparity: f64, min: f64 },

    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("preintegration finalized with no samples")]
    EmptyPreintegration,

    #[error("frame timestamp {next_ns} ns does not advance past {prev_ns} ns")]
    NonMonotonicTime { prev_ns: i64, next_ns: i64 },

    #[error("estimator diverged: {0}")]
    Diverged(String),

    #[error("unknown synthetic scenario `{0}`")]
    UnknownScenario(String),
}

impl VioError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VioError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        VioError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
