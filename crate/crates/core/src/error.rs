use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("sensor pose {0:?} lies inside scene geometry")]
    PoseInsideGeometry([f64; 3]),
    #[error("position is not finite")]
    NonFinitePosition,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed grid dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
