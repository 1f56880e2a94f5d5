use std::io;

use thiserror::Error;

/// Errors produced anywhere in the kit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("data length {len} does not match dimensions {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("expert id {expert} out of range for {experts} experts (token {token})")]
    ExpertOutOfRange {
        token: usize,
        expert: usize,
        experts: usize,
    },

    #[error("token {token} routes to expert {expert} more than once")]
    DuplicateExpert { token: usize, expert: usize },

    #[error("top-k of {k} exceeds expert count {experts}")]
    TopKExceedsExperts { k: usize, experts: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("accumulate mode requires a destination buffer")]
    MissingDestination,

    #[error("write mode does not take a destination buffer")]
    UnexpectedDestination,

    #[error("latency must be positive and finite, got {value} at device {device}")]
    NonPositiveLatency { device: usize, value: f64 },

    #[error("negative ideal share {value} at index {index}")]
    NegativeShare { index: usize, value: f64 },

    #[error("allocation sums to {actual}, expected {expected}")]
    AllocationSum { expected: usize, actual: usize },

    #[error("cache capacity of {capacity} values exceeded by {requested}")]
    CacheCapacity { capacity: usize, requested: usize },

    #[error("malformed tensor file: {0}")]
    MalformedHeader(String),

    #[error("tensor dimensions overflow: {0:?}")]
    DimensionOverflow(Vec<u64>),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.into(),
        actual: actual.into(),
    }
}
