use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or overwrite a parameter. New parameters are trainable.
    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.entries[id.0].value = value;
            return id;
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?.0].value)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.entries {
            p.trainable = trainable;
        }
    }

    /// Set the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Copy every parameter of `other` into `self`, replacing same-named entries.
    pub fn merge_from(&mut self, other: &ParamStore) {
        for p in other.iter() {
            let id = self.insert(&p.name, p.value.clone());
            self.entries[id.0].trainable = p.trainable;
        }
    }
}

/// Deterministic parameter initializer (ChaCha8 stream, no platform math).
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))
    }

    /// Uniform in ±1/sqrt(fan_in), the usual default for linear and conv layers.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        self.uniform(shape, bound)
    }

    /// He-uniform, ±sqrt(6/fan_in): keeps activation scale through rectifier-like stacks.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in.max(1) as f32).sqrt();
        self.uniform(shape, bound)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
