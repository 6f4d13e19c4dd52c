use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported quadrature degree {0} (supported range 1..=20)")]
    UnsupportedDegree(usize),

    #[error("parent lookup failed: point ({x}, {y}) is not inside any coarse triangle")]
    LookupFailure { x: f64, y: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("io failure at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
