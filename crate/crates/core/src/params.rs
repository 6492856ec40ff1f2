//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// How a parameter tensor is filled at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform on `±gain·sqrt(3 / fan_in)`, i.e. variance `gain² / fan_in`.
    Uniform {
        gain: f64,
    },
}

/// Parameters keyed by dotted path, iterated in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for one named stream under a master seed. Streams are independent of
/// registration order, so adding a module never shifts another module's init.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()).rotate_left(17))
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Registers `name` with `shape`; fan-in is the product of all but the first axis.
    pub fn register(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Uniform { gain } => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                let mut rng = stream_rng(seed, name);
                Tensor::from_fn(shape.to_vec(), |_| {
                    T::from_f64(rng.random_range(-bound..=bound))
                })
            }
        };
        let prev = self.tensors.insert(name.to_string(), tensor);
        assert!(prev.is_none(), "parameter `{name}` registered twice");
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalars held under names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, t) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    /// Inserts every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamSet::<f32>::new();
        a.register(3, "x.w", &[4, 2, 3, 3], Init::Uniform { gain: 1.0 });
        a.register(3, "y.w", &[2, 2, 1, 1], Init::Uniform { gain: 1.0 });
        let mut b = ParamSet::<f32>::new();
        b.register(3, "y.w", &[2, 2, 1, 1], Init::Uniform { gain: 1.0 });
        b.register(3, "x.w", &[4, 2, 3, 3], Init::Uniform { gain: 1.0 });
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_init_respects_bound() {
        let mut p = ParamSet::<f64>::new();
        p.register(0, "w", &[8, 4, 3, 3], Init::Uniform { gain: 1.0 });
        let bound = (3.0f64 / 36.0).sqrt();
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.count(), 8 * 36);
    }
}
