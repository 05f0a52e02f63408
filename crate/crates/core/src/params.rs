//! Named parameter storage and per-step binding onto a tape.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named tensors in a fixed (sorted) order. Frozen entries are bound as
/// constants and never updated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn insert_frozen(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
        self.frozen.insert(name.to_string());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| !self.frozen.contains(*k))
            .cloned()
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.frozen.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Registers every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if self.frozen.contains(name) {
                    tape.constant(t.clone())
                } else {
                    tape.param(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Tape handles for one forward pass, by parameter name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} not bound")))
    }

    /// Gradients for every trainable parameter, zero when unreachable.
    pub fn collect_grads(&self, store: &ParamStore, grads: &Gradients) -> BTreeMap<String, Tensor> {
        store
            .trainable_names()
            .into_iter()
            .map(|name| {
                let t = store.get(&name).expect("bound from this store");
                let g = grads.get_or_zeros(self.vars[&name], t.shape());
                (name, g)
            })
            .collect()
    }
}

/// `fan_in × fan_out` matrix drawn from `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
