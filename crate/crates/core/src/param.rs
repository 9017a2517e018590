//! Flat parameter store. Blocks hold [`ParamId`] handles; values, grads
//! and non-trainable state (BN running stats) live here under stable
//! names so the optimizer and serializers see one deterministic order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Optimizer updates apply only to trainable entries; running stats
    /// and other forward-pass state are stored non-trainable.
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(invalid("param", alloc::format!("duplicate name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Non-trainable forward state (e.g. BN running statistics).
    pub fn add_state(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<ParamId> {
        self.insert(name, rng.normal_tensor(shape, std), true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::filled(shape, T::val(value)), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = *g * c;
            }
        }
    }

    pub fn add_to_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        let g = &mut self.params[id.0].grad;
        debug_assert_eq!(g.shape(), delta.shape());
        for (dst, &src) in g.data_mut().iter_mut().zip(delta.data()) {
            *dst = *dst + src;
        }
    }

    /// Number of scalar coordinates across trainable params.
    pub fn trainable_coords(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_grads_match_shape() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(store.add("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(store.get(id).grad.shape(), &[2, 3]);
        assert_eq!(store.lookup("w"), Some(id));
    }

    #[test]
    fn state_entries_are_not_trainable() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        store.add_state("bn.mean", Tensor::zeros(&[2])).unwrap();
        assert_eq!(store.trainable_coords(), 2);
    }
}
