//! Named parameter storage shared by every trainable component.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Container, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name; layouts are built by
    /// code, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    /// Weight matrix drawn from `N(0, std^2)`.
    pub fn normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Loads every parameter onto `tape`; `trainable` decides which leaves
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| tape.leaf(t.clone(), trainable(n)))
            .collect();
        Binding { vars }
    }

    pub fn to_container(&self, config_hash: String, metadata: serde_json::Value) -> Container {
        Container {
            tensors: self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect(),
            config_hash,
            metadata,
        }
    }

    /// Overwrites values from a container. Every parameter must be present
    /// with an identical shape; extra entries are reported as an error.
    pub fn load_container(&mut self, c: &Container) -> Result<(), String> {
        if c.tensors.len() != self.len() {
            return Err(format!(
                "container holds {} tensors, layout expects {}",
                c.tensors.len(),
                self.len()
            ));
        }
        for (name, t) in &c.tensors {
            let id = self.id(name).ok_or_else(|| format!("unexpected tensor {name}"))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(format!(
                    "shape of {name}: layout {:?}, container {:?}",
                    self.tensors[id.0].shape(),
                    t.shape()
                ));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, String> {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other
                .id(name)
                .ok_or_else(|| format!("source lacks {name}"))?;
            let t = other.get(src);
            if t.shape() != self.tensors[i].shape() {
                return Err(format!("shape mismatch for {name}"));
            }
            self.tensors[i] = t.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Handles supplied by the caller, in [`ParamStore::ids`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
