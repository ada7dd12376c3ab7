use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid error: {0}")]
    Grid(String),
    #[error("time error: {0}")]
    Time(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("sun below horizon (zenith {0:.3}°)")]
    SunBelowHorizon(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
