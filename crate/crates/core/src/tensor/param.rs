use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Gradients, Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Named weights and buffers of one network.
///
/// Every store carries a unique id so that gradients recorded on a shared
/// graph flow back only into the store that owns the leaf.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            uid: next_uid(),
            entries: Vec::new(),
            by_name: BTreeMap::new(),
            frozen: false,
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
            frozen: self.frozen,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: &str, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            kind,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: stored {:?}, given {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen && self.entries[id.0].kind == ParamKind::Trainable
    }

    /// Marks every entry as a constant for subsequent graphs.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of this store's leaves on `graph` into `grad`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (v, id) in graph.param_leaves(self.uid) {
            if !self.is_trainable(id) {
                continue;
            }
            if let Some(g) = grads.get(v) {
                self.entries[id.0].grad.add_assign(g);
            }
        }
    }

    /// Largest absolute gradient entry across the store.
    pub fn max_abs_grad(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data().iter())
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}
