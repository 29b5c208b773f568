use std::collections::BTreeMap;

use super::{Tensor4, TensorError};
use crate::Scalar;

/// Handle to a storage slot in a [`ParamStore`]. Parameters registered
/// under the same sharing group resolve to the same slot.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    /// Storage key: the sharing group when set, otherwise the first name
    /// registered for the slot.
    pub key: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub sharing_group: Option<String>,
    /// Every name that resolves to this slot, in registration order.
    pub aliases: Vec<String>,
}

/// Owns all trainable tensors of a network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    slots: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
    by_group: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            by_name: BTreeMap::new(),
            by_group: BTreeMap::new(),
        }
    }

    /// Registers `name`. When `group` already names a slot, `init` is
    /// discarded and `name` becomes an alias of that slot, whose shape must
    /// match.
    pub fn register(
        &mut self,
        name: &str,
        init: Tensor4<T>,
        group: Option<&str>,
    ) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::Usage(format!("parameter {name} registered twice")));
        }
        if let Some(g) = group {
            if let Some(&id) = self.by_group.get(g) {
                let slot = &mut self.slots[id.0];
                if slot.value.shape() != init.shape() {
                    return Err(TensorError::Shape(format!(
                        "sharing group {g} holds {} but {name} wants {}",
                        slot.value.shape(),
                        init.shape()
                    )));
                }
                slot.aliases.push(name.to_string());
                self.by_name.insert(name.to_string(), id);
                return Ok(id);
            }
        }
        let id = ParamId(self.slots.len());
        let key = group.unwrap_or(name).to_string();
        self.slots.push(Parameter {
            key,
            grad: Tensor4::zeros(init.shape()),
            value: init,
            sharing_group: group.map(str::to_string),
            aliases: vec![name.to_string()],
        });
        self.by_name.insert(name.to_string(), id);
        if let Some(g) = group {
            self.by_group.insert(g.to_string(), id);
        }
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.slots[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4<T> {
        &self.slots[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Number of distinct storage slots.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total scalar count over distinct slots, so shared tensors count once.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.slots.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.slots.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.slots {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor4<T>) -> Result<(), TensorError> {
        self.slots[id.0].grad.add_assign(g)
    }
}
