use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentPolicy};
use super::data::SampleBatch;
use super::loss::{segmentation_loss, LossKind};
use super::metrics::ConfusionMatrix;
use super::schedule::{poly_lr, LrSchedule};
use super::{TrainError, IGNORE_INDEX};
use crate::arch::ExecutableNet;
use crate::tensor::{kernels, Mode, Sgd, SgdConfig, Tape};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Steps to run in this call.
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate is looked up at the absolute iteration, so a resumed
    /// run continues the same curve.
    pub schedule: LrSchedule,
    #[serde(default)]
    pub sgd: SgdConfig,
    pub loss: LossKind,
    pub seed: u64,
    /// Validate after every iteration `i` with `(i + 1) % eval_every == 0`,
    /// and after the last step of the call. 0 disables the periodic runs.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<(), TrainError> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(TrainError::Config(format!(
                "batch_size must lie in 1..={train_len}, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return Err(TrainError::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Absolute iteration, counted from zero.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub graph_hash: String,
    pub start_iter: usize,
    pub end_iter: usize,
    pub records: Vec<StepRecord>,
    pub final_loss: f64,
    pub final_miou: Option<f64>,
    pub seconds: f64,
}

/// Indices of the mini-batch for `iter`. Depends only on `(seed, iter)`.
fn batch_indices(seed: u64, iter: usize, n: usize, k: usize) -> Vec<usize> {
    if k == n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `cfg.steps` SGD steps starting at absolute iteration `start_iter`.
/// Each step record is written to `trace` as one JSON line.
pub fn train_loop<T: Scalar>(
    net: &mut ExecutableNet<T>,
    opt: &mut Sgd<T>,
    train: &SampleBatch<T>,
    val: Option<&SampleBatch<T>>,
    cfg: &TrainConfig,
    start_iter: usize,
    mut trace: Option<&mut dyn Write>,
) -> Result<TrainReport, TrainError> {
    cfg.validate(train.len())?;
    if train.num_classes != net.num_classes() {
        return Err(TrainError::Input(format!(
            "dataset has {} classes, network predicts {}",
            train.num_classes,
            net.num_classes()
        )));
    }
    if start_iter + cfg.steps > cfg.schedule.total_iter {
        return Err(TrainError::Config(format!(
            "steps {}..{} run past total_iter {}",
            start_iter,
            start_iter + cfg.steps,
            cfg.schedule.total_iter
        )));
    }
    opt.config = cfg.sgd;
    let t0 = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    let end = start_iter + cfg.steps;
    for iter in start_iter..end {
        let lr = poly_lr(&cfg.schedule, iter)?;
        let mut batch = train.select(&batch_indices(cfg.seed, iter, train.len(), cfg.batch_size));
        if let Some(policy) = &cfg.augment {
            batch = augment(&batch, cfg.seed.wrapping_add(iter as u64), policy)?;
        }
        net.store_mut().zero_grad();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let logits = net.forward(&mut tape, x, Mode::Train)?;
        let loss_var = segmentation_loss(&mut tape, logits, &batch.labels, cfg.loss)?;
        let loss = tape.value(loss_var).item().to_f64_lossy();
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: iter, loss });
        }
        tape.backward_into(loss_var, net.store_mut())?;
        opt.step(net.store_mut(), lr)?;

        let last = iter + 1 == end;
        let due = cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0;
        let miou = match val {
            Some(v) if due || last => Some(evaluate(net, v, cfg.batch_size)?.miou()),
            _ => None,
        };
        let rec = StepRecord { step: iter, lr, loss, miou };
        if let Some(w) = trace.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|source| TrainError::Io {
                path: "<trace>".into(),
                source,
            })?;
        }
        records.push(rec);
    }
    Ok(TrainReport {
        graph_hash: net.graph().hash(),
        start_iter,
        end_iter: end,
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        final_miou: records.last().and_then(|r| r.miou),
        records,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Eval-mode confusion matrix over `batch`, `chunk` images per forward.
pub fn evaluate<T: Scalar>(net: &mut ExecutableNet<T>, batch: &SampleBatch<T>, chunk: usize) -> Result<ConfusionMatrix, TrainError> {
    let chunk = chunk.max(1);
    let mut cm = ConfusionMatrix::new(batch.num_classes, IGNORE_INDEX);
    let idx: Vec<usize> = (0..batch.len()).collect();
    for part in idx.chunks(chunk) {
        let sub = batch.select(part);
        let probs = net.predict(&sub.images)?;
        cm.update(&kernels::argmax_channels(&probs), &sub.labels)?;
    }
    Ok(cm)
}
