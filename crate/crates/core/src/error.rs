use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("point is behind the camera (camera-space z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid depth value {0}")]
    InvalidDepth(f64),

    #[error("empty point set")]
    EmptyPointSet,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical fault in {layer}: non-finite activation")]
    NumericalFault { layer: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("deformation error: {0}")]
    Deformation(String),

    #[error("segmenter failed: {0}")]
    Segmenter(String),

    #[error("format error in {asset}: {reason}")]
    Format { asset: String, reason: String },

    #[error("missing asset {path}")]
    MissingAsset { path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {asset}: {source}")]
    Json {
        asset: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error in {asset}: {reason}")]
    Image { asset: String, reason: String },
}

impl Error {
    pub(crate) fn format(asset: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            asset: asset.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
