use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, t: &mut Tensor) {
        if self == Activation::Relu {
            for v in t.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Residual,
}

/// Affine map `x ↦ W·x + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Uniform weights in `±sqrt(6 / in_dim)`, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Linear {
            weight: Tensor::matrix(out_dim, in_dim, data),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Multiply-accumulates count 2, bias adds count 1.
    pub fn flops(&self) -> u64 {
        let (i, o) = (self.in_dim() as u64, self.out_dim() as u64);
        2 * i * o + o
    }

    fn check(&self) -> bool {
        self.weight.shape().len() == 2 && self.bias.shape() == [self.out_dim()]
    }

    pub(crate) fn apply(&self, x: &Tensor) -> Tensor {
        tensor::linear(x, &self.weight, &self.bias)
    }
}

/// Parameter slot within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Weight,
    Bias,
    InnerWeight,
    InnerBias,
}

/// One sequential layer.
///
/// A residual block computes `act(h + W2·relu(W1·h + b1) + b2)` with both
/// maps square, so a block with zero weights and identity activation is the
/// identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Dense {
        linear: Linear,
        activation: Activation,
    },
    Residual {
        first: Linear,
        second: Linear,
        activation: Activation,
    },
}

impl Layer {
    pub fn dense<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Layer::Dense {
            linear: Linear::init(in_dim, out_dim, rng),
            activation,
        }
    }

    pub fn residual<R: Rng + ?Sized>(dim: usize, activation: Activation, rng: &mut R) -> Self {
        Layer::Residual {
            first: Linear::init(dim, dim, rng),
            second: Linear::init(dim, dim, rng),
            activation,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Residual { .. } => LayerKind::Residual,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense { activation, .. } | Layer::Residual { activation, .. } => *activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense { linear, .. } => linear.in_dim(),
            Layer::Residual { first, .. } => first.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense { linear, .. } => linear.out_dim(),
            Layer::Residual { second, .. } => second.out_dim(),
        }
    }

    pub fn flops(&self) -> u64 {
        match self {
            Layer::Dense { linear, .. } => linear.flops(),
            Layer::Residual { first, second, .. } => {
                first.flops() + second.flops() + second.out_dim() as u64
            }
        }
    }

    /// Checks parameter shapes and the residual squareness requirement.
    pub fn validate(&self, index: usize) -> Result<()> {
        let ok = match self {
            Layer::Dense { linear, .. } => linear.check(),
            Layer::Residual { first, second, .. } => {
                first.check()
                    && second.check()
                    && first.in_dim() == first.out_dim()
                    && second.in_dim() == second.out_dim()
                    && first.out_dim() == second.in_dim()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                format!("layers[{index}]"),
                "parameter shapes inconsistent with layer kind",
            ))
        }
    }

    pub fn params(&self) -> Vec<(Slot, &Tensor)> {
        match self {
            Layer::Dense { linear, .. } => {
                vec![(Slot::Weight, &linear.weight), (Slot::Bias, &linear.bias)]
            }
            Layer::Residual { first, second, .. } => vec![
                (Slot::Weight, &first.weight),
                (Slot::Bias, &first.bias),
                (Slot::InnerWeight, &second.weight),
                (Slot::InnerBias, &second.bias),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(Slot, &mut Tensor)> {
        match self {
            Layer::Dense { linear, .. } => vec![
                (Slot::Weight, &mut linear.weight),
                (Slot::Bias, &mut linear.bias),
            ],
            Layer::Residual { first, second, .. } => vec![
                (Slot::Weight, &mut first.weight),
                (Slot::Bias, &mut first.bias),
                (Slot::InnerWeight, &mut second.weight),
                (Slot::InnerBias, &mut second.bias),
            ],
        }
    }

    pub(crate) fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Dense { linear, activation } => {
                let mut y = linear.apply(x);
                activation.apply(&mut y);
                y
            }
            Layer::Residual {
                first,
                second,
                activation,
            } => {
                let mut h = first.apply(x);
                Activation::Relu.apply(&mut h);
                let mut y = second.apply(&h);
                // skip connection added after the inner branch
                for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
                    *o += i;
                }
                activation.apply(&mut y);
                y
            }
        }
    }
}

/// Runs `input` (`[rows, in]` or a single `[in]` vector) through `layers`.
pub fn forward(layers: &[Layer], input: &Tensor) -> Result<Tensor> {
    check_chain(layers, input.cols())?;
    let mut x = input.as_matrix();
    for layer in layers {
        x = layer.apply(&x);
    }
    Ok(x)
}

/// Like [`forward`], but keeps the activation after every layer.
pub fn forward_trace(layers: &[Layer], input: &Tensor) -> Result<Vec<Tensor>> {
    check_chain(layers, input.cols())?;
    let mut out = Vec::with_capacity(layers.len());
    let mut x = input.as_matrix();
    for layer in layers {
        x = layer.apply(&x);
        out.push(x.clone());
    }
    Ok(out)
}

/// Verifies each layer's input width against its predecessor's output.
pub fn check_chain(layers: &[Layer], input_dim: usize) -> Result<()> {
    let mut dim = input_dim;
    for (i, layer) in layers.iter().enumerate() {
        layer.validate(i)?;
        if layer.in_dim() != dim {
            return Err(Error::Dimension {
                layer: i,
                expected: layer.in_dim(),
                found: dim,
            });
        }
        dim = layer.out_dim();
    }
    Ok(())
}

/// Total FLOPS of a layer sequence; see [`Linear::flops`] for the convention.
pub fn flops(layers: &[Layer]) -> u64 {
    layers.iter().map(Layer::flops).sum()
}
