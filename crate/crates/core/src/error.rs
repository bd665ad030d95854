use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("insufficient inliers: best consensus {0} < 3")]
    InsufficientInliers(usize),
    #[error("invalid scene configuration field `{0}`")]
    ConfigInvalid(String),
    #[error("flow covariance is singular or not positive definite")]
    SingularCovariance,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient depth-valid features in frame {0}")]
    InsufficientFeatures(usize),
    #[error("missing camera pose for frame {0}")]
    MissingCameraPose(usize),
    #[error("points {0} and {1} belong to different bodies")]
    MismatchedBody(usize, usize),
    #[error("not enough point pairs: requested {requested}, available {available}")]
    NotEnoughPairs { requested: usize, available: usize },
    #[error("bad sketch dimensions: t = {t}, m = {m}")]
    BadDimensions { t: usize, m: usize },
    #[error("numerical failure in block {block}: {what}")]
    NumericalFailure { block: String, what: &'static str },
    #[error("trajectories share only {0} frames, need at least 3")]
    InsufficientOverlap(usize),
    #[error("invalid parameter `{0}`")]
    InvalidParameter(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
