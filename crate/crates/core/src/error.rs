use std::path::PathBuf;

use pdae_autograd::ShapeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("malformed IDX file {path}: {msg}")]
    Idx { path: PathBuf, msg: String },
    #[error("unreadable image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("no data to evaluate")]
    EmptyData,
    #[error("no images found in {0}")]
    EmptyDir(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("frozen parameter `{0}` changed during training")]
    FrozenDrift(String),
    #[error("acceptance rate {rate:.3e} fell below floor {floor:.1e} after {proposals} proposals ({accepted} accepted)")]
    AcceptanceFloor { rate: f64, floor: f64, proposals: usize, accepted: usize },
    #[error("mixture oracle supports at most {max} points, got {n}")]
    OracleTooLarge { n: usize, max: usize },
    #[error("no stage split reached accuracy {0}")]
    NotFound(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
