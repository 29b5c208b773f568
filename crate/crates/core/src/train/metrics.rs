use serde::{Deserialize, Serialize};

use super::TrainError;

/// `counts[truth * k + pred]` over scored pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub ignore_index: u8,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: u8) -> Self {
        Self {
            num_classes,
            ignore_index,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one prediction map. Pixels whose truth is the ignore index are
    /// skipped.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<(), TrainError> {
        if pred.len() != truth.len() {
            return Err(TrainError::Input(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == self.ignore_index {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(TrainError::Input(format!("label pair ({t}, {p}) outside {k} classes")));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `tp / (tp + fp + fn)` per class; `None` for classes absent from both
    /// prediction and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.num_classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}
