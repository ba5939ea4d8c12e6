use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty layer spec")]
    EmptyLayerSpec,

    #[error("mask region is empty at layer {layer}")]
    EmptyMaskRegion { layer: String },

    #[error("image {height}x{width} too small for backbone stride {stride}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("backbone weights: {0}")]
    BackboneWeights(String),

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("covariance of component {component} is not positive semidefinite")]
    NonPsdCovariance { component: usize },

    #[error("missing array '{0}' in container")]
    MissingArray(String),

    #[error("container format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Short machine-readable tag, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyLayerSpec => "EmptyLayerSpec",
            Error::EmptyMaskRegion { .. } => "EmptyMaskRegion",
            Error::ImageTooSmall { .. } => "ImageTooSmall",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidSample(_) => "InvalidSample",
            Error::BackboneWeights(_) => "BackboneWeights",
            Error::UnknownStrategy { .. } => "UnknownStrategy",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptyDataset => "EmptyDataset",
            Error::InsufficientSamples(_) => "InsufficientSamples",
            Error::NonPsdCovariance { .. } => "NonPsdCovariance",
            Error::MissingArray(_) => "MissingArray",
            Error::Format(_) => "Format",
            Error::Io { .. } => "Io",
            Error::Image { .. } => "Image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dims(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
