use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {len} nodes")]
    Index { index: usize, len: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
