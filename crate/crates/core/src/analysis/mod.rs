//! Closed-form cost model and path analysis over block graphs. Nothing here
//! runs a network.

mod cost;
mod paths;

use thiserror::Error;

use crate::arch::ArchError;

pub use cost::{count_flops, count_params, format_count, BlockCost, CostReport, GroupCost};
pub use paths::{enumerate_paths, longest_path, PathMode, PathReport, DEFAULT_PATH_CAP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("input {h}x{w} is not divisible by the graph stride {stride}")]
    Indivisible { h: usize, w: usize, stride: usize },
    #[error("block {0} is not in the graph")]
    UnknownBlock(String),
    #[error("{count} paths exceed the listing cap of {cap}")]
    CapExceeded { count: u128, cap: usize },
    #[error(transparent)]
    Arch(#[from] ArchError),
}
