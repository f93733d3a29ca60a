//! Named parameter storage with per-tensor trainability flags.
//!
//! Parameters live outside any [`Graph`]: a forward pass loads them as leaves,
//! backward produces gradients keyed by the same names, and the optimizer
//! writes updates back here. Storage is a `BTreeMap` so iteration order (and
//! therefore every downstream accumulation) is stable across runs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

/// RNG for one named parameter: seeded from the run seed and the name digest,
/// so adding or reordering other parameters never shifts its draw.
pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Total scalar count over trainable parameters only.
    pub fn trainable_scalar_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Set trainability for every parameter whose name matches the predicate.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if pred(name) {
                p.trainable = trainable;
            }
        }
    }

    /// Load one parameter into a graph as a leaf. Trainability carries over
    /// as the leaf's requires_grad flag.
    pub fn load(&self, g: &mut Graph, name: &str) -> Result<TensorId> {
        let p = self.get(name)?;
        g.leaf(p.data.clone(), &p.shape, p.trainable)
    }

    /// Load as a leaf with requires_grad forced on regardless of the stored
    /// flag. Finite-difference checks probe frozen tensors this way.
    pub fn load_tracked(&self, g: &mut Graph, name: &str) -> Result<TensorId> {
        let p = self.get(name)?;
        g.leaf(p.data.clone(), &p.shape, true)
    }
}

/// Registry of parameters loaded into one graph, so a forward pass binds each
/// name to a single leaf and gradients can be routed back by name afterward.
#[derive(Default)]
pub struct Loaded {
    map: BTreeMap<String, TensorId>,
    /// when set, every leaf is loaded with requires_grad on (gradient checks)
    pub track_all: bool,
}

impl Loaded {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracked() -> Self {
        Self {
            map: BTreeMap::new(),
            track_all: true,
        }
    }

    pub fn get(&mut self, g: &mut Graph, ps: &ParamSet, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.map.get(name) {
            return Ok(id);
        }
        let id = if self.track_all {
            ps.load_tracked(g, name)?
        } else {
            ps.load(g, name)?
        };
        self.map.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.map.get(name).copied()
    }

    /// Gradients keyed by parameter name, for every loaded leaf that received
    /// one in the backward pass.
    pub fn collect_grads(
        &self,
        g: &Graph,
        grads: &[Option<Vec<f64>>],
    ) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.map {
            if let Some(gr) = g.grad(grads, id) {
                out.insert(name.clone(), gr.to_vec());
            }
        }
        out
    }
}
