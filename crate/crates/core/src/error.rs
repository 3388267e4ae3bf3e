use thiserror::Error;

/// Errors raised by the registration primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("no jointly valid entries")]
    EmptyOverlap,
    #[error("empty sample")]
    EmptySample,
    #[error("empty patch")]
    EmptyPatch,
    #[error("empty input")]
    EmptyInput,
    #[error("empty correspondence set")]
    EmptyCorrespondences,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no consensus: best hypothesis has {inliers} inliers")]
    NoConsensus { inliers: usize },
    #[error("no point projects inside the image")]
    EmptyVisibleSet,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
