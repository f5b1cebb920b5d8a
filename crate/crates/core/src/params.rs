//! Named parameter storage shared by all models. Entries keep insertion
//! order so optimizer state, checkpoints, and reruns line up exactly.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Trainable parameters get gradients and Adam updates; non-trainable
    /// entries are buffers (batch-norm running stats) that are checkpointed
    /// but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|i| self.entries[*i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of stored floats.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replace the value of `id`, keeping shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", cur.value.shape(), value.shape()));
        }
        self.entries[id.0].value = value;
        Ok(())
    }
}

/// Records which tape leaf each parameter was bound to in the current
/// forward pass, so gradients can be routed back after `backward`.
#[derive(Default)]
pub struct Binding {
    bound: Vec<(ParamId, Var)>,
}

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    /// Leaf a parameter onto the tape (trainable entries get gradients
    /// unless `freeze` is set).
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId, freeze: bool) -> Var {
        let entry = &store.entries[id.0];
        let rg = entry.trainable && !freeze;
        let v = tape.leaf(entry.value.clone(), rg);
        self.bound.push((id, v));
        v
    }

    pub fn bound(&self) -> &[(ParamId, Var)] {
        &self.bound
    }
}

/// Batch-norm running-stat updates collected during a training forward pass
/// and applied to the store afterwards.
#[derive(Default)]
pub struct StatUpdates {
    updates: Vec<(ParamId, Tensor)>,
}

impl StatUpdates {
    pub fn new() -> Self {
        StatUpdates::default()
    }

    pub fn push(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn apply(self, store: &mut ParamStore) -> Result<()> {
        for (id, value) in self.updates {
            store.set(id, value)?;
        }
        Ok(())
    }
}
