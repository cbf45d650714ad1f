//! Minimal dense reverse-mode autodiff: graph, optimizers, parameter
//! storage and a finite-difference gradient checker.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{gradient_check, GradCheck};
pub use graph::{Gradients, Graph, Op, OpKind, Var};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::ParamStore;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("tensor shape {shape:?} does not hold {len} elements")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}
