//! Named parameter container with deterministic (lexicographic) iteration.

use std::collections::BTreeMap;

use super::{AdError, AdResult, Arr, Value};

struct Entry {
    value: Value,
    trainable: bool,
}

/// Map from parameter path (e.g. `agent/gru/wx`) to its [`Value`].
///
/// Iteration order is lexicographic so optimizer state and checkpoints are
/// reproducible across runs.
#[derive(Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Entry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Value, trainable: bool) -> AdResult<()> {
        if self.entries.contains_key(name) {
            return Err(AdError::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(name.to_string(), Entry { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> AdResult<Value> {
        self.entries
            .get(name)
            .map(|e| e.value.clone())
            .ok_or_else(|| AdError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// `(name, value, trainable)` in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Value, bool)> + '_ {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.value.clone(), e.trainable))
    }

    /// `(name, value)` for trainable parameters only, in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, Value)> + '_ {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), e.value.clone()))
    }

    pub fn zero_grads(&self) {
        for e in self.entries.values() {
            e.value.zero_grad();
        }
    }

    /// Hard-copy every parameter's data from `src` into this set.
    /// Names and shapes must match exactly.
    pub fn copy_from(&mut self, src: &ParameterSet) -> AdResult<()> {
        if self.entries.len() != src.entries.len() {
            return Err(AdError::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                src.entries.len()
            )));
        }
        for (name, e) in &self.entries {
            let s = src
                .entries
                .get(name)
                .ok_or_else(|| AdError::UnknownParameter(name.clone()))?;
            let data = s.value.data_clone();
            if data.shape() != e.value.shape().as_slice() {
                return Err(AdError::ShapeMismatch {
                    op: "copy_from",
                    lhs: e.value.shape(),
                    rhs: data.shape().to_vec(),
                });
            }
            e.value.set_data(data);
        }
        Ok(())
    }

    /// Flat `(name, data)` snapshot in name order.
    pub fn snapshot(&self) -> Vec<(String, Arr)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.data_clone()))
            .collect()
    }

    /// Restore data by name; unknown or shape-mismatched names are errors.
    pub fn restore(&mut self, snapshot: &[(String, Arr)]) -> AdResult<()> {
        for (name, data) in snapshot {
            let e = self
                .entries
                .get(name)
                .ok_or_else(|| AdError::UnknownParameter(name.clone()))?;
            if data.shape() != e.value.shape().as_slice() {
                return Err(AdError::ShapeMismatch {
                    op: "restore",
                    lhs: e.value.shape(),
                    rhs: data.shape().to_vec(),
                });
            }
            e.value.set_data(data.clone());
        }
        Ok(())
    }

    /// Merge another set under a name prefix, sharing the underlying values.
    pub fn adopt(&mut self, prefix: &str, other: &ParameterSet) -> AdResult<()> {
        for (name, value, trainable) in other.iter() {
            self.insert(&format!("{prefix}/{name}"), value, trainable)?;
        }
        Ok(())
    }

    /// Mark every parameter frozen: excluded from the optimizer and from
    /// gradient propagation (target networks).
    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.trainable = false;
            e.value.set_requires_grad(false);
        }
    }
}
