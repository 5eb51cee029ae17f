//! Ordered, named parameter collections.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Insertion-ordered set of named tensors. Order is part of the contract:
/// checkpoints, digests, and optimizer state all follow it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(|i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// SHA-256 over names, shapes, and little-endian f64 payloads, in set
    /// order. Bitwise-identical parameters produce identical digests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
