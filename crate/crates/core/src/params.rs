//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{PrmError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Learnable tensors keyed by name, iterated in sorted name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor2<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor2<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| PrmError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| PrmError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor2<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor2<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor2<T>)> {
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor2::is_finite)
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to existing tape variables.
    pub fn from_vars<I: IntoIterator<Item = (String, Var)>>(vars: I) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| PrmError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients after `backward`; tensors the loss never reached get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor2<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.shape(v);
                    Tensor2::zeros(r, c)
                });
                (k.clone(), g)
            })
            .collect()
    }
}

/// Glorot-uniform matrix, seeded by `(seed, name)`.
pub fn glorot<T: Scalar>(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor2<T> {
    let mut rng = rng::stream(seed, &format!("init/{name}"), &[]);
    let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of((rng.random::<f64>() * 2.0 - 1.0) * limit))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized buffer")
}

/// Normal(0, std²) matrix, seeded by `(seed, name)`.
pub fn normal_init<T: Scalar>(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Tensor2<T> {
    let mut rng = rng::stream(seed, &format!("init/{name}"), &[]);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            T::of(z * std)
        })
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_is_seeded_and_bounded() {
        let a: Tensor2<f64> = glorot(1, "w", 8, 4);
        let b: Tensor2<f64> = glorot(1, "w", 8, 4);
        let c: Tensor2<f64> = glorot(1, "v", 8, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let lim = (6.0f64 / 12.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= lim));
    }

    #[test]
    fn bind_and_collect_grads() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a", Tensor2::filled(1, 2, 2.0));
        p.insert("unused", Tensor2::filled(2, 2, 1.0));
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let s = tape.sum(bound.get("a").unwrap());
        tape.backward(s).unwrap();
        let g = bound.grads(&tape);
        assert_eq!(g["a"].data(), &[1.0, 1.0]);
        assert_eq!(g["unused"], Tensor2::zeros(2, 2));
        assert!(bound.get("missing").is_err());
    }
}
