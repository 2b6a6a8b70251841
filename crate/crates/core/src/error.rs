use thiserror::Error;

/// Errors produced by the mapping library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("image dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("level {level} out of range for a structure with {levels} levels")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("invalid occupancy configuration: {0}")]
    InvalidMohvConfig(String),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("non-positive input: {0}")]
    NonPositiveInput(String),
    #[error("frame has no tracked points")]
    NoTrackedPoints,
    #[error("keyframe set is empty")]
    EmptyKeyframeSet,
    #[error("no keyframes available for optimization")]
    NoKeyframes,
    #[error("optimization produced a non-finite gradient")]
    NonFiniteGradient,
}

pub type Result<T> = std::result::Result<T, Error>;
