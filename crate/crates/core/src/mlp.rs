//! Fully connected feed-forward networks.
//!
//! `FC(n)_m` in the model descriptions means `m` hidden layers of width `n`;
//! [`MlpParams::fc`] builds exactly that shape between a given input and
//! output size.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid("activation", format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Layer {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Weights of a feed-forward network. The activation is applied after every
/// layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.weight.shape()[0] {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!("layer {k}: weight {:?}, bias {:?}", l.weight.shape(), l.bias.shape()),
                ));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_features() != pair[1].in_features() {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!(
                        "layer {k} emits {} features but layer {} expects {}",
                        pair[0].out_features(),
                        k + 1,
                        pair[1].in_features()
                    ),
                ));
            }
        }
        Ok(MlpParams { layers, activation })
    }

    /// Uniform fan-in initialisation, `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        Self::build(sizes, activation, |fan_in, _| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.gen_range(-bound..=bound)
        })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::build(sizes, activation, |_, _| 0.0)
    }

    /// `FC(width)_depth` from `input` to `output`.
    pub fn fc(
        input: usize,
        width: usize,
        depth: usize,
        output: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init(&fc_sizes(input, width, depth, output), activation, rng)
    }

    fn build(
        sizes: &[usize],
        activation: Activation,
        mut draw: impl FnMut(usize, bool) -> f64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid("sizes", format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|p| {
                let (i, o) = (p[0], p[1]);
                let w = (0..i * o).map(|_| draw(i, true)).collect();
                let b = (0..o).map(|_| draw(i, false)).collect();
                Layer {
                    weight: Tensor::new(vec![o, i], w).expect("sized above"),
                    bias: Tensor::vector(b),
                }
            })
            .collect();
        MlpParams::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_features()];
        s.extend(self.layers.iter().map(Layer::out_features));
        s
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().out_features()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, …`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Sets every parameter to zero.
    pub fn zero_out(&mut self) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Plain forward pass; `x` is `[in]` or `[rows, in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let e = crate::autodiff::Eager;
        let bound = self.bind(&e);
        let y = bound.forward(&e, &e.constant(x.clone()))?;
        Ok(std::rc::Rc::try_unwrap(y).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// Lifts the weights onto a backend. On a [`crate::autodiff::Tape`] they
    /// become differentiable leaves.
    pub fn bind<B: ParamBackend>(&self, b: &B) -> BoundMlp<B::V> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (b.lift(&l.weight), b.lift(&l.bias)))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            sizes: self.sizes(),
            activation: self.activation,
            weights: self.layers.iter().map(|l| l.weight.data().to_vec()).collect(),
            biases: self.layers.iter().map(|l| l.bias.data().to_vec()).collect(),
        }
    }

    pub fn from_checkpoint(c: &MlpCheckpoint) -> Result<Self> {
        if c.sizes.len() < 2
            || c.weights.len() != c.sizes.len() - 1
            || c.biases.len() != c.sizes.len() - 1
        {
            return Err(Error::invalid("checkpoint", "layer count does not match sizes"));
        }
        let layers = c
            .sizes
            .windows(2)
            .zip(c.weights.iter().zip(&c.biases))
            .map(|(p, (w, b))| {
                Ok(Layer {
                    weight: Tensor::new(vec![p[1], p[0]], w.clone())?,
                    bias: Tensor::new(vec![p[1]], b.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers, c.activation)
    }
}

/// Layer sizes of `FC(width)_depth` between `input` and `output`.
pub fn fc_sizes(input: usize, width: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat(width).take(depth));
    s.push(output);
    s
}

/// Backends that can host parameters.
pub trait ParamBackend: Backend {
    fn lift(&self, t: &Tensor) -> Self::V;
}

impl ParamBackend for crate::autodiff::Eager {
    fn lift(&self, t: &Tensor) -> Self::V {
        std::rc::Rc::new(t.clone())
    }
}

impl ParamBackend for crate::autodiff::Tape {
    fn lift(&self, t: &Tensor) -> Var {
        self.param(t)
    }
}

/// Network weights living on a backend.
#[derive(Clone, Debug)]
pub struct BoundMlp<V> {
    layers: Vec<(V, V)>,
    activation: Activation,
}

impl<V: Clone> BoundMlp<V> {
    pub fn forward<B: Backend<V = V>>(&self, b: &B, x: &V) -> Result<V> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, (w, bias)) in self.layers.iter().enumerate() {
            h = b.affine(&h, w, Some(bias))?;
            if k < last {
                h = b.activate(&h, self.activation)?;
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = &V> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }
}

impl BoundMlp<Var> {
    /// Gradients in the same order as [`MlpParams::tensors`].
    pub fn grads(&self, g: &Gradients) -> Result<Vec<Tensor>> {
        self.vars().map(|v| g.wrt(*v).cloned()).collect()
    }
}

/// On-disk network format shared by every model in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    /// One row-major `[out, in]` array per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}
