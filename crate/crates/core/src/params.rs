//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter or buffer inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (normalization statistics) are stored alongside weights but
    /// never receive gradients.
    pub trainable: bool,
}

/// Flat, ordered collection of named tensors owned by a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Kaiming-uniform weights for a layer with `fan_in` inputs.
pub fn kaiming_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// Uniform `±1/sqrt(fan_in)` bias initialization.
pub fn bias_uniform<T: Scalar>(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(&[len], |_| T::of(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_resolve_and_buffers_are_frozen() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("a.w", Tensor::zeros(&[2]));
        let m = s.add_buffer("a.mean", Tensor::zeros(&[2]));
        assert_eq!(s.get("a.w"), Some(w));
        assert!(s.is_trainable(w));
        assert!(!s.is_trainable(m));
        assert_eq!(s.num_trainable(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::zeros(&[1]));
        s.add("x", Tensor::zeros(&[1]));
    }

    #[test]
    fn init_is_seeded() {
        let a: Tensor<f32> = kaiming_uniform(&[4, 4], 4, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Tensor<f32> = kaiming_uniform(&[4, 4], 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }
}
