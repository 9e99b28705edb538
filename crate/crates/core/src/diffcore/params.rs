//! Named parameter collections with seed-reproducible initialization.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// An ordered (by name) collection of trainable tensors.
///
/// Re-creating the same parameters from the same `rng_seed` reproduces
/// bit-identical values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParamSet {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            tensors: BTreeMap::new(),
            rng_seed,
        }
    }

    /// Insert a tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(CoreError::Usage(format!(
                "parameter `{name}` already exists"
            )));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| CoreError::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterate `(name, tensor)` in deterministic (sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.clear_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Clone the parameters whose names start with `prefix` into a new set.
    pub fn extract_prefix(&self, prefix: &str, seed: u64) -> ParamSet {
        let mut out = ParamSet::new(seed);
        for (name, t) in &self.tensors {
            if name.starts_with(prefix) {
                out.tensors.insert(name.clone(), t.clone());
            }
        }
        out
    }

    /// Copy values from `other` into parameters of the same name.
    pub fn adopt_values(&mut self, other: &ParamSet) -> Result<()> {
        for (name, src) in &other.tensors {
            let dst = self.get_mut(name)?;
            if dst.shape() != src.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adopt_values",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    /// A seeded generator for initializing this set's tensors.
    pub fn rng(&self) -> StdRng {
        StdRng::seed_from_u64(self.rng_seed)
    }
}

/// Glorot-uniform initialization: `U(-sqrt(6/(fan_in+fan_out)), +...)`.
///
/// For matrices `[out, in]` the fans are the two dimensions; vectors are
/// treated as `fan_in = len, fan_out = 1`.
pub fn glorot_uniform(shape: &[usize], rng: &mut StdRng) -> Tensor {
    let (fan_out, fan_in) = match shape {
        [n] => (1, *n),
        [o, i] => (*o, *i),
        _ => {
            let o = shape[0];
            let i: usize = shape[1..].iter().product();
            (o, i)
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let values = (0..numel)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_values(shape, values).expect("shape/values agree by construction")
}

/// Map from parameter names to their leaf nodes on one tape.
#[derive(Debug)]
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    /// Bind every parameter as a trainable leaf.
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in params.iter() {
            ids.insert(name.to_string(), tape.leaf(t));
        }
        Self { ids }
    }

    /// Bind every parameter as a constant (evaluation mode: no gradients).
    pub fn bind_frozen(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in params.iter() {
            let id = tape
                .constant(t.values().to_vec(), t.shape())
                .expect("tensor invariant: values match shape");
            ids.insert(name.to_string(), id);
        }
        Self { ids }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Usage(format!("parameter `{name}` is not bound")))
    }

    /// After `tape.backward`, add each bound parameter's gradient into the
    /// set. Parameters the loss never reached accumulate zero, so every
    /// tensor ends up with a populated gradient buffer.
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter_mut() {
            match self.ids.get(name).and_then(|id| tape.grad(*id)) {
                Some(g) => {
                    let g = g.to_vec();
                    t.accumulate_grad(&g)?;
                }
                None => t.ensure_grad(),
            }
        }
        Ok(())
    }
}
