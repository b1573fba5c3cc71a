use super::{NnError, Tensor};
use std::collections::HashMap;

/// Named parameter tensors with matching gradient buffers.
///
/// Entries keep insertion order; gradient accumulation and optimizer
/// updates iterate in that order. Non-trainable entries hold batch-norm
/// running statistics.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    pub version: u64,
    grads_populated: bool,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { entries: Vec::new(), index: HashMap::new(), version: 0, grads_populated: false }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(&value.shape);
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(Entry { name, value, grad, trainable });
        idx
    }

    pub fn idx(&self, name: &str) -> Result<usize, NnError> {
        self.index.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.entries[self.idx(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        let i = self.idx(name)?;
        Ok(&mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.entries[self.idx(name)?].grad)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut Entry {
        &mut self.entries[idx]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub(super) fn accumulate_grad(&mut self, idx: usize, grad: &Tensor) {
        let entry = &mut self.entries[idx];
        debug_assert_eq!(entry.grad.shape, grad.shape);
        for (g, d) in entry.grad.data.iter_mut().zip(&grad.data) {
            *g += d;
        }
        self.grads_populated = true;
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.data.fill(0.0);
        }
        self.grads_populated = false;
    }

    /// Squared L2 norm over all trainable gradients (diagnostics).
    pub fn grad_norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.data.iter())
            .map(|g| g * g)
            .sum()
    }
}
