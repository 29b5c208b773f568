use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor4, TensorError};
use crate::Scalar;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient:
///
/// ```text
/// v <- momentum * v + (g + weight_decay * w)
/// w <- w - lr * v
/// ```
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: BTreeMap<ParamId, Tensor4<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor4<T>> {
        self.velocity.get(&id)
    }

    pub fn velocities(&self) -> impl Iterator<Item = (ParamId, &Tensor4<T>)> {
        self.velocity.iter().map(|(&id, v)| (id, v))
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor4<T>) {
        self.velocity.insert(id, v);
    }

    /// Applies one update to every slot from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<(), TensorError> {
        if !(lr >= 0.0) {
            return Err(TensorError::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        let lr = T::lit(lr);
        let mom = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        for (id, p) in store.iter_mut() {
            p.value.expect_same_shape(&p.grad)?;
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor4::zeros(p.value.shape()));
            v.expect_same_shape(&p.value)?;
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for ((vi, wi), &gi) in v.data_mut().iter_mut().zip(w.iter_mut()).zip(g) {
                *vi = mom * *vi + (gi + wd * *wi);
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Single-tensor form of the update, for use outside a [`ParamStore`].
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor4<T>,
    grad: &Tensor4<T>,
    velocity: &mut Tensor4<T>,
    lr: f64,
    config: SgdConfig,
) -> Result<(), TensorError> {
    if !(lr >= 0.0) {
        return Err(TensorError::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    param.expect_same_shape(grad)?;
    param.expect_same_shape(velocity)?;
    let (lr, mom, wd) = (T::lit(lr), T::lit(config.momentum), T::lit(config.weight_decay));
    for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mom * *v + (g + wd * *w);
        *w -= lr * *v;
    }
    Ok(())
}
