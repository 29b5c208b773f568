//! ShelfNet workbench: an executable, differentiable block graph of the
//! ShelfNet segmentation family plus an analytic cost and path model.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

// `!(x >= 0.0)` is how config checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod arch;
mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Tensor4f = tensor::Tensor4<f32>;
pub type Tensor4d = tensor::Tensor4<f64>;
pub type Tapef = tensor::Tape<f32>;
pub type Taped = tensor::Tape<f64>;
pub type ParamStoref = tensor::ParamStore<f32>;
pub type ParamStored = tensor::ParamStore<f64>;


pub type ShelfNetf = arch::ExecutableNet<f32>;
pub type ShelfNetd = arch::ExecutableNet<f64>;
