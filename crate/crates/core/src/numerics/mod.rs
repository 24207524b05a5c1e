//! Dense double-precision tensors, a reverse-mode tape, optimizers and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod suite;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a one-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range (< {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

#[cfg(test)]
mod tests;
