use serde::{Deserialize, Serialize};

use super::TrainError;

/// Polynomial decay `base_lr * (1 - iter / total_iter) ^ power`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_iter: usize,
    #[serde(default = "default_power")]
    pub power: f64,
}

fn default_power() -> f64 {
    0.9
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_iter: usize) -> Self {
        Self {
            base_lr,
            total_iter,
            power: default_power(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if self.total_iter == 0 {
            return Err(TrainError::Config("total_iter must be positive".into()));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(TrainError::Config(format!("power must be positive, got {}", self.power)));
        }
        Ok(())
    }
}

pub fn poly_lr(sched: &LrSchedule, iter: usize) -> Result<f64, TrainError> {
    sched.validate()?;
    if iter > sched.total_iter {
        return Err(TrainError::Config(format!(
            "iteration {iter} beyond total_iter {}",
            sched.total_iter
        )));
    }
    if iter == sched.total_iter {
        return Ok(0.0);
    }
    let frac = 1.0 - iter as f64 / sched.total_iter as f64;
    Ok(sched.base_lr * frac.powf(sched.power))
}
