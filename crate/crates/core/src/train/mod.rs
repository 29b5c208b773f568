//! Desk-scale training and evaluation: schedule, losses, metrics, synthetic
//! data, augmentation, multi-scale inference, checkpoints and timing.

mod augment;
mod bench;
mod checkpoint;
mod data;
mod loss;
mod metrics;
mod multiscale;
mod schedule;
mod trainer;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::arch::ArchError;
use crate::tensor::TensorError;

pub use augment::{augment, AugmentPolicy};
pub use bench::{bench_forward, BenchStats};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use data::{
    class_color, expected_class_frequencies, load_dataset, read_pgm, read_ppm, save_dataset, synth_dataset, write_pgm, write_ppm,
    Provenance, SampleBatch, SynthConfig,
};
pub use loss::{ohem_loss, ohem_select, segmentation_loss, LossKind, OHEM_THRESHOLD};
pub use metrics::ConfusionMatrix;
pub use multiscale::{multi_scale_predict, EVAL_SCALES};
pub use schedule::{poly_lr, LrSchedule};
pub use trainer::{evaluate, train_loop, StepRecord, TrainConfig, TrainReport};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint does not match the network: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}
