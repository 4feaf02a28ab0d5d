//! Parameterised building blocks. A block remembers where its tensors start
//! inside a [`ParamStore`] and reads them back through the bound [`Params`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{conv2d_forward, Graph, Var};
use super::params::{he_normal, xavier_uniform, ParamStore, Params};
use super::tensor::{Scalar, Tensor};

/// Initialisation of the last layer of a block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FinalInit {
    /// Weights and bias zero: the block outputs exactly 0.
    Zero,
    /// Xavier-uniform weights, zero bias.
    Xavier,
    /// He-normal weights scaled by `gain`, constant `bias`.
    Scaled { gain: f64, bias: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    /// Number of conv layers (ReLU between consecutive layers).
    pub layers: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub spec: ConvStackSpec,
    pub first: usize,
}

fn fill<T: Scalar>(shape: &[usize], v: f64) -> Tensor<T> {
    Tensor::full(shape, T::lit(v))
}

fn final_weights<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, init: FinalInit, rng: &mut impl Rng) -> (Tensor<T>, Tensor<T>) {
    let bias_shape = [shape[0]];
    match init {
        FinalInit::Zero => (Tensor::zeros(shape), Tensor::zeros(&bias_shape)),
        FinalInit::Xavier => (xavier_uniform(shape, fan_in, fan_out, rng), Tensor::zeros(&bias_shape)),
        FinalInit::Scaled { gain, bias } => (
            he_normal::<T>(shape, fan_in, rng).map(|v| v * T::lit(gain)),
            fill(&bias_shape, bias),
        ),
    }
}

impl ConvStack {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, spec: ConvStackSpec, last: FinalInit, rng: &mut impl Rng) -> Self {
        assert!(spec.layers >= 1 && spec.kernel % 2 == 1);
        let first = store.len();
        let k = spec.kernel;
        for i in 0..spec.layers {
            let cin = if i == 0 { spec.in_channels } else { spec.hidden };
            let cout = if i + 1 == spec.layers { spec.out_channels } else { spec.hidden };
            let shape = [cout, cin, k, k];
            let (w, b) = if i + 1 == spec.layers {
                final_weights(&shape, cin * k * k, cout * k * k, last, rng)
            } else {
                (he_normal(&shape, cin * k * k, rng), Tensor::zeros(&[cout]))
            };
            store.push(format!("{prefix}.conv{i}.weight"), w);
            store.push(format!("{prefix}.conv{i}.bias"), b);
        }
        Self { spec, first }
    }

    pub fn num_params(&self) -> usize {
        2 * self.spec.layers
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params, x: Var) -> Var {
        let pad = self.spec.kernel / 2;
        let mut h = x;
        for i in 0..self.spec.layers {
            h = g.conv2d(h, p[self.first + 2 * i], p[self.first + 2 * i + 1], pad);
            if i + 1 < self.spec.layers {
                h = g.relu(h);
            }
        }
        h
    }

    /// Graph-free forward pass that drops activations as it goes.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let pad = self.spec.kernel / 2;
        let mut h = x.clone();
        for i in 0..self.spec.layers {
            h = conv2d_forward(&h, store.get(self.first + 2 * i), store.get(self.first + 2 * i + 1), pad);
            if i + 1 < self.spec.layers {
                for v in h.data_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
        h
    }
}

/// Fully connected stack `FC (+ReLU+FC)*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub first: usize,
}

impl Mlp {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dims: &[usize], last: FinalInit, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2);
        let first = store.len();
        let n = dims.len() - 1;
        for i in 0..n {
            let shape = [dims[i + 1], dims[i]];
            let (w, b) = if i + 1 == n {
                final_weights(&shape, dims[i], dims[i + 1], last, rng)
            } else {
                (he_normal(&shape, dims[i], rng), Tensor::zeros(&[dims[i + 1]]))
            };
            store.push(format!("{prefix}.fc{i}.weight"), w);
            store.push(format!("{prefix}.fc{i}.bias"), b);
        }
        Self {
            dims: dims.to_vec(),
            first,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params, x: Var) -> Var {
        let n = self.dims.len() - 1;
        let mut h = x;
        for i in 0..n {
            h = g.linear(h, p[self.first + 2 * i], p[self.first + 2 * i + 1]);
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        h
    }
}
