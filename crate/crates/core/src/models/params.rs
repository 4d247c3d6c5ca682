//! Named, ordered parameter storage.

use crate::tensor::Tensor;
use std::collections::HashMap;

/// Ordered map of parameter name to tensor. Order is the manifest order and
/// is preserved through serialization.
#[derive(Clone, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name:?} inserted twice"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let &i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"));
        &self.entries[i].1
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Replace an existing parameter's value (shape must match).
    pub fn set(&mut self, name: &str, value: Tensor) {
        let &i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"));
        assert_eq!(
            self.entries[i].1.shape(),
            value.shape(),
            "parameter {name:?}: shape changed"
        );
        self.entries[i].1 = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Check the set against a manifest: every (name, shape) present in the
    /// given order, nothing extra.
    pub fn matches_manifest(&self, manifest: &[(String, Vec<usize>)]) -> Result<(), String> {
        if self.entries.len() != manifest.len() {
            return Err(format!(
                "parameter count {} does not match manifest count {}",
                self.entries.len(),
                manifest.len()
            ));
        }
        for ((name, tensor), (want_name, want_shape)) in self.entries.iter().zip(manifest) {
            if name != want_name {
                return Err(format!("parameter {name:?} where manifest wants {want_name:?}"));
            }
            if tensor.shape() != &want_shape[..] {
                return Err(format!(
                    "parameter {name:?}: shape {:?} where manifest wants {want_shape:?}",
                    tensor.shape()
                ));
            }
        }
        Ok(())
    }

    /// Bitwise equality of all values (detects any training-side mutation).
    pub fn bit_identical(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data().iter())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }
}

impl std::fmt::Debug for ParameterSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ParameterSet({} tensors, {} values)", self.len(), self.num_values())
    }
}
