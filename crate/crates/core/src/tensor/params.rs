use std::collections::BTreeMap;

use super::{Result, Tensor2D, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    value: Tensor2D,
    grad: Tensor2D,
}

/// Named trainable tensors, each paired with a same-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTape {
    slots: Vec<Slot>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
    grads_ready: bool,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.slots.len());
        let (r, c) = value.shape();
        self.slots.push(Slot {
            name: name.clone(),
            value,
            grad: Tensor2D::zeros(r, c),
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2D {
        &self.slots[id.0].grad
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_coords(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2D) {
        self.slots[id.0].grad.add_assign(g);
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub(crate) fn finish_step(&mut self) {
        self.step += 1;
        self.grads_ready = false;
    }

    /// Overwrites a gradient buffer. Used by tests and diagnostics.
    pub fn set_grad(&mut self, id: ParamId, g: Tensor2D) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.grad.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                left: slot.grad.shape(),
                right: g.shape(),
            });
        }
        slot.grad = g;
        self.grads_ready = true;
        Ok(())
    }

    /// Iterates `(name, value)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.value.is_finite() && s.grad.is_finite())
    }
}
