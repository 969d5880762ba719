//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unsupported potential or mode: {0}")]
    Unsupported(String),
    #[error("divergent series: {0}")]
    Divergence(String),
    #[error("inadmissible scale function: {0}")]
    Admissibility(String),
    #[error("resource budget exceeded: {0}")]
    Resource(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("grid resolution too coarse: {0}")]
    Resolution(String),
    #[error("curve does not cover the requested range: {0}")]
    Coverage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
