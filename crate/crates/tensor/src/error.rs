use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (size {size})")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient probe failed for parameter `{param}`: {msg}")]
    Probe { param: String, msg: String },
}

impl TensorError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            msg: msg.into(),
        }
    }
}
