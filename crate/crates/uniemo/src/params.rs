//! Named parameter store. Every learnable tensor lives here under a
//! hierarchical name (e.g. `encoder.block3.attn.qkv.weight`), giving
//! checkpoints, the optimizer, and fine-tune transfer a single stable
//! addressing scheme. Iteration order is insertion order, which is fixed
//! by construction order and therefore deterministic.

use crate::autograd::{Array, Graph, Var};
use indexmap::IndexMap;
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Mutable collection of named parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a fresh parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Keep only parameters whose name starts with one of the prefixes.
    pub fn filter_prefixes(&self, prefixes: &[&str]) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, value) in &self.map {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(name.clone(), value.clone());
            }
        }
        out
    }

    /// Insert every parameter into a graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut vars = IndexMap::new();
        for (name, value) in &self.map {
            vars.insert(name.clone(), g.leaf(value.clone(), true));
        }
        BoundParams { vars }
    }
}

/// Graph handles for one bound parameter set.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Handle for a parameter; panics on unknown names (a construction bug,
    /// not a runtime condition).
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gaussian-initialized array (mean 0).
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// Uniform fan-in init for a `[fan_in, fan_out]` linear weight (or its bias
/// given the same fan_in): U(−1/√fan_in, 1/√fan_in).
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Array::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> Array {
    Array::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Array {
    Array::ones(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> Array {
    Array::from_elem(IxDyn(shape), v)
}
