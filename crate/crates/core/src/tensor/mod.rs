//! Dense NCHW tensors with a reverse-mode tape covering the operators a
//! ShelfNet needs: convolutions, batch norm, activations, dropout,
//! resampling, pooling and the segmentation losses.

mod dense;
pub mod kernels;
mod optim;
mod param;
mod tape;

use thiserror::Error;

pub use dense::{Shape4, Tensor4};
pub use kernels::ConvGeom;
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BnConfig, Gradients, RunningStats, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
}

/// Train or eval behaviour for batch norm and dropout.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
