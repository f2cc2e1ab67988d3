//! Registry of named parameters and buffers.
//!
//! Every trainable weight and every persistent buffer (batch-norm running
//! statistics) lives in one registry, addressed by a stable string key such
//! as `layer03/block2/sep3/rep0/dw`. Supernets allocate every candidate
//! operation; stand-alone models allocate only what their genotype selects.
//! The key scheme is shared, which is what makes weight sharing and the
//! checkpoint container work.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::scalar::Scalar;

/// Index of a slot inside one registry. Not meaningful across registries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamSlot<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Trainable parameters receive gradients and optimizer updates;
    /// buffers (running statistics) are persisted but never differentiated.
    pub trainable: bool,
    pub update_count: u64,
}

impl<T: Scalar> ParamSlot<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<T> {
    slots: Vec<ParamSlot<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            slots: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: Vec<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter key: {name}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("{} values for key {name}", value.len()),
            });
        }
        let id = ParamId(self.slots.len());
        self.slots.push(ParamSlot {
            name: name.to_string(),
            shape,
            value,
            grad: vec![T::zero(); numel],
            trainable,
            update_count: 0,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Trainable parameter with explicit initial values.
    pub fn add_param(&mut self, name: &str, shape: Vec<usize>, value: Vec<T>) -> Result<ParamId> {
        self.insert(name, shape, value, true)
    }

    /// Trainable parameter filled with one constant.
    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, fill: T) -> Result<ParamId> {
        let numel = shape.iter().product();
        self.insert(name, shape, vec![fill; numel], true)
    }

    /// Trainable parameter drawn from a normal distribution.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut DetRng,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let value = (0..numel)
            .map(|_| T::cast(rng.normal(0.0, std)))
            .collect();
        self.insert(name, shape, value, true)
    }

    /// Trainable parameter drawn uniformly from `[-limit, limit]`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        limit: f64,
        rng: &mut DetRng,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let value = (0..numel)
            .map(|_| T::cast((rng.uniform() * 2.0 - 1.0) * limit))
            .collect();
        self.insert(name, shape, value, true)
    }

    /// Non-trainable buffer (running statistics).
    pub fn add_buffer(&mut self, name: &str, shape: Vec<usize>, fill: T) -> Result<ParamId> {
        let numel = shape.iter().product();
        self.insert(name, shape, vec![fill; numel], false)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot<T> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut ParamSlot<T> {
        &mut self.slots[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.slots[id.0].value
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<Vec<T>> {
        Arc::new(self.slots[id.0].value.clone())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slots in creation order (deterministic given a deterministic build).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSlot<T>)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    /// Total number of trainable elements.
    pub fn trainable_elements(&self) -> u64 {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.numel() as u64)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.fill(T::zero());
        }
    }

    /// Accumulate a gradient contribution into one slot.
    pub fn accumulate_grad(&mut self, id: ParamId, contrib: &[T]) {
        let slot = &mut self.slots[id.0];
        debug_assert_eq!(slot.grad.len(), contrib.len());
        for (g, c) in slot.grad.iter_mut().zip(contrib) {
            *g += *c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_keys_rejected() {
        let mut reg: ParamRegistry<f32> = ParamRegistry::new();
        reg.add_const("w", vec![2, 2], 1.0).unwrap();
        assert!(reg.add_const("w", vec![2, 2], 1.0).is_err());
    }

    #[test]
    fn shape_must_match_values() {
        let mut reg: ParamRegistry<f32> = ParamRegistry::new();
        assert!(reg.add_param("w", vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn trainable_elements_skips_buffers() {
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.add_const("w", vec![4], 0.5).unwrap();
        reg.add_buffer("mean", vec![4], 0.0).unwrap();
        assert_eq!(reg.trainable_elements(), 4);
    }
}
