//! Named, shaped collections of trainable tensors.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar = f32> {
    pub value: Tensor<S>,
    /// Frozen parameters are never touched by an optimizer.
    pub frozen: bool,
    /// Row 0 is the padding row of an embedding table and never updated.
    pub pad_row: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        Param {
            value,
            frozen: false,
            pad_row: false,
        }
    }
}

/// Ordered map from parameter name to tensor. Unit of checkpointing and
/// transfer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    entries: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        self.insert_param(name, Param::new(value))
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param<S>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, param: Param<S>) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<S>> {
        self.entries.shift_remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    let q = Param {
                        value: p.value.cast(),
                        frozen: p.frozen,
                        pad_row: p.pad_row,
                    };
                    (k.clone(), q)
                })
                .collect(),
        }
    }

    /// Same names, shapes and bitwise-identical values.
    pub fn bit_eq(&self, other: &ParamStore<S>) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .all(|(k, p)| other.get(k).is_some_and(|q| p.value.bit_eq(&q.value)))
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    /// Glorot/Xavier uniform for an `out × in` weight matrix.
    pub fn xavier<S: Scalar>(out: usize, inp: usize, rng: &mut impl Rng) -> Tensor<S> {
        let bound = (6.0 / (out + inp) as f64).sqrt();
        Tensor::uniform(&[out, inp], bound, rng)
    }

    pub fn zeros<S: Scalar>(n: usize) -> Tensor<S> {
        Tensor::zeros(&[n])
    }
}
