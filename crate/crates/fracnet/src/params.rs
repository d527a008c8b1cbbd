//! Named parameter store shared by the model, the optimizer, and checkpoints.
//!
//! Entries keep their insertion order, which is fixed by the model spec walk,
//! so every iteration over the store is deterministic. Non-trainable entries
//! hold state like batch-norm running statistics; they serialize with the
//! checkpoint but receive no gradients.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Params<E> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> Params<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        mut tensor: Tensor<E>,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        tensor.requires_grad = trainable;
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<E>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replaces entry data, keeping shape.
    pub fn set_data(&mut self, id: ParamId, data: &[E]) -> Result<(), TensorError> {
        let t = &mut self.entries[id.0].tensor;
        if data.len() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                context: "set_data",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Adds `delta` into the gradient slot of `id`, allocating zeros first if
    /// the slot is empty.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[E]) {
        let t = &mut self.entries[id.0].tensor;
        debug_assert_eq!(delta.len(), t.numel());
        let grad = t.grad.get_or_insert_with(|| vec![E::zero(); delta.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Total scalar count of trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Elementwise comparison of trainable data against another store.
    pub fn trainable_data_eq(&self, other: &Self) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries
            .iter()
            .zip(&other.entries)
            .filter(|(a, _)| a.trainable)
            .all(|(a, b)| a.name == b.name && a.tensor.data() == b.tensor.data())
    }
}
