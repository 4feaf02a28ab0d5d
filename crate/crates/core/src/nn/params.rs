use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Params(Vec<Var>);

impl Index<usize> for Params {
    type Output = Var;

    fn index(&self, i: usize) -> &Var {
        &self.0[i]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.entries {
            p.trainable = trainable;
        }
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Params {
        Params(self.entries.iter().map(|p| g.leaf(p.value.clone(), p.trainable)).collect())
    }

    /// Gradients after `g.backward`, zero-filled for parameters that did not
    /// receive one.
    pub fn grads(&self, g: &Graph<T>, bound: &Params) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|(p, v)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Replaces values by name, checking that names and shapes match exactly.
    pub fn load_values(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let idx = self
                .index_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if self.entries[idx].value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.entries[idx].value.shape()
                )));
            }
            self.entries[idx].value = value;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// He (Kaiming) normal initialisation for ReLU layers.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Xavier (Glorot) uniform initialisation.
pub fn xavier_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).unwrap()
}
