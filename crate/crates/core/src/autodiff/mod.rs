//! Minimal reverse-mode differentiation engine.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{central_difference, gradcheck, GradCheckReport};
pub use graph::{BatchStats, ConvGeom, Gradients, Graph, ReduceKind, Var};
pub use optim::{sgd_step, Binding, ParamId, ParamStore, Parameter, SgdConfig};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("parameter {name} has no gradient")]
    MissingGradient { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
