//! Named parameter collections and their binding onto a tape.

use std::collections::HashMap;

use super::{Tape, Tensor, Var};

/// An ordered, name-addressed set of parameter tensors. Iteration order is
/// insertion order, which keeps optimizer state, checkpoints and hashes
/// stable across runs.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let id = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let id = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// FNV-1a over the exact bit patterns; used to assert that frozen
    /// sub-models never change during downstream training.
    pub fn bit_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Leaf every tensor onto `tape` in insertion order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { vars, index: self.index.clone() }
    }

    /// Bind as frozen leaves: gradients flow through but are never
    /// accumulated for these tensors.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.frozen_leaf(t.clone())).collect();
        BoundParams { vars, index: self.index.clone() }
    }
}

/// Tape handles for a bound [`ParamSet`], addressable by name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        let id = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
