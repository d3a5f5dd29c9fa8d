//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! layers (convolutions, normalization, transformer blocks) and the AdamW
//! optimizer the training stages are built from.
//!
//! Everything runs on the CPU in double precision so that analytic gradients
//! can be checked against central finite differences.

pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use ops::{log_softmax_rows, softplus};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
