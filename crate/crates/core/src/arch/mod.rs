//! Block graphs of the ShelfNet family: declarative construction, JSON
//! round-trip and instantiation into a trainable network.

mod build;
mod graph;
mod layers;
mod net;
mod spec;

use thiserror::Error;

use crate::tensor::TensorError;

pub use build::{build_backbone, build_backbone_classifier, build_shelf, make_s_block, make_transition};
pub use graph::{transition_layers, BlockGraph, BlockKind, BlockNode, Edge, EdgeKind, StageSpec, Transition};
pub use layers::{Extent, LayerKind, LayerSpec};
pub use net::{ExecutableNet, InitPolicy};
pub use spec::{BackboneFamily, BackboneSpec, BlockId, Level, Role, ShelfSpec, Variant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("unknown block {0:?}")]
    UnknownBlock(String),
    #[error("malformed graph: {0}")]
    Graph(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("bad architecture JSON: {0}")]
    Json(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
