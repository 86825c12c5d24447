use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point depth {0} is non-positive (at or behind the camera)")]
    DepthNonPositive(f64),
    #[error("invalid ray range: t_near {t_near} must be less than t_far {t_far}")]
    InvalidRange { t_near: f64, t_far: f64 },
    #[error("sample footprint outside image bounds")]
    OutOfBounds,
    #[error("no source views provided")]
    NoSourceViews,
    #[error("q = {0} outside (0, 1]")]
    InvalidQ(f64),
    #[error("non-finite gradient in parameter group '{0}'")]
    NonFiniteGradient(&'static str),
    #[error("photometric loss diverged: {loss} vs baseline {baseline} for 100 consecutive steps")]
    DivergenceDetected { loss: f64, baseline: f64 },
    #[error("fused point cloud has only {0} points")]
    EmptyReconstruction(usize),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image too small for {levels}-level pyramid: {width}x{height}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("invalid config at '{field}': {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
