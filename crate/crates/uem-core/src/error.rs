//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    ShapeContract {
        op: String,
        expected: String,
        got: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("ln: negative argument {value} at entry {index}")]
    LogDomain { value: f64, index: usize },

    #[error("backward: root must be a scalar, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },

    #[error("zero-norm feature for instance {instance}")]
    ZeroNormFeature { instance: usize },

    #[error("row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("{what}: index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: String,
        index: usize,
        len: usize,
    },

    #[error("empty {what}")]
    Empty { what: String },

    #[error("cluster count {k} outside valid range [{min}, {max}]")]
    InvalidK { k: usize, min: usize, max: usize },

    #[error("domain labels must be 0 or 1, got {value} at position {index}")]
    NonBinaryLabel { value: f64, index: usize },

    #[error("stale prototype structure: {msg}")]
    StaleStructure { msg: String },

    #[error("non-finite {what} in {term} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        what: String,
        term: String,
        epoch: usize,
        batch: usize,
    },

    #[error("{path}:{line}: {msg}")]
    DataFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("labels required: {msg}")]
    MissingLabels { msg: String },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape_mismatch(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn shape_contract(op: &str, expected: &str, got: &[usize]) -> Self {
        Error::ShapeContract {
            op: op.to_string(),
            expected: expected.to_string(),
            got: got.to_vec(),
        }
    }
}
