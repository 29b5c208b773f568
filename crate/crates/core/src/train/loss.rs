use serde::{Deserialize, Serialize};

use super::{TrainError, IGNORE_INDEX};
use crate::tensor::{Tape, Var};
use crate::Scalar;

/// `-ln 0.7`: pixels predicted with probability below 0.7 count as hard.
pub const OHEM_THRESHOLD: f64 = 0.356_674_943_938_732_4;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Mean over pixels whose loss exceeds `threshold`, topped up to the
    /// `min_kept` hardest. `min_kept` defaults to a sixteenth of the pixels.
    Ohem {
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default)]
        min_kept: Option<usize>,
    },
}

fn default_threshold() -> f64 {
    OHEM_THRESHOLD
}

impl LossKind {
    pub fn ohem() -> Self {
        LossKind::Ohem {
            threshold: OHEM_THRESHOLD,
            min_kept: None,
        }
    }
}

/// Pixels OHEM averages over. `valid` marks non-ignored pixels.
pub fn ohem_select(losses: &[f64], valid: &[bool], threshold: f64, min_kept: usize) -> Result<Vec<bool>, TrainError> {
    if min_kept == 0 {
        return Err(TrainError::Config("min_kept must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..losses.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(TrainError::Input("OHEM over an empty pixel set".into()));
    }
    let mut mask: Vec<bool> = (0..losses.len()).map(|i| valid[i] && losses[i] > threshold).collect();
    let hard = mask.iter().filter(|&&m| m).count();
    if hard < min_kept {
        // Highest losses first; ties keep index order.
        idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
        for &i in idx.iter().take(min_kept) {
            mask[i] = true;
        }
    }
    Ok(mask)
}

/// OHEM mean of a per-pixel loss map as a tape scalar.
pub fn ohem_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pixel_losses: Var,
    valid: &[bool],
    threshold: f64,
    min_kept: usize,
) -> Result<Var, TrainError> {
    let values: Vec<f64> = tape.value(pixel_losses).data().iter().map(|v| v.to_f64_lossy()).collect();
    let mask = ohem_select(&values, valid, threshold, min_kept)?;
    Ok(tape.masked_mean(pixel_losses, mask)?)
}

/// Scalar training loss of `logits` against `labels`.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8], kind: LossKind) -> Result<Var, TrainError> {
    match kind {
        LossKind::CrossEntropy => Ok(tape.softmax_cross_entropy(logits, labels, IGNORE_INDEX)?.0),
        LossKind::Ohem { threshold, min_kept } => {
            let map = tape.pixel_nll(logits, labels, IGNORE_INDEX)?;
            let valid: Vec<bool> = labels.iter().map(|&l| l != IGNORE_INDEX).collect();
            let min_kept = min_kept.unwrap_or((labels.len() / 16).max(1));
            ohem_loss(tape, map, &valid, threshold, min_kept)
        }
    }
}
