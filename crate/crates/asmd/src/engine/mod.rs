//! Reverse-mode autodiff over dense f64 tensors.
//!
//! The engine is deliberately small: a flat tape of nodes ([`Graph`]), a
//! fixed op vocabulary, a named parameter store with partition-level
//! freezing, and a finite-difference checker that keeps the whole thing
//! honest.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod store;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, Op};
pub use rng::Rng;
pub use store::{LrSchedule, ParamKey, ParameterStore, Partition};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible operand shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{want} input, got shape {got:?}")]
    BadRank {
        op: &'static str,
        want: usize,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    BadArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown partition '{0}'")]
    UnknownPartition(String),
    #[error("partition '{0}' already exists")]
    DuplicatePartition(String),
    #[error("no tensor {index} in partition '{partition}'")]
    UnknownTensor { partition: String, index: usize },
    #[error("gradient for {partition}[{index}] has shape {got:?}, parameter has {want:?}")]
    GradShapeMismatch {
        partition: String,
        index: usize,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("no learning rate configured for partition '{0}'")]
    MissingLearningRate(String),
    #[error("learning rate for '{0}' must be positive, got {1}")]
    BadLearningRate(String, f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint {path}: checksum mismatch, file is corrupt or truncated")]
    ChecksumMismatch { path: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
