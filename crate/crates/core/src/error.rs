use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} {index} >= {bound}")]
    Range {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty data: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("duplicate pair (user {user}, item {item})")]
    Duplicate { user: usize, item: usize },

    #[error("rating {rating} outside scale [{min}, {max}]")]
    RatingOutOfScale { rating: f64, min: f64, max: f64 },

    #[error("invalid propensity {value} at (user {user}, item {item})")]
    Propensity { user: usize, item: usize, value: f64 },

    #[error("problem too large: {0}")]
    Capacity(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
