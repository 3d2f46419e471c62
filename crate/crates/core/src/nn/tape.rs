//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] is filled during a forward pass. Leaves are either constants or
//! parameters tagged with a [`ParamId`]; every other node remembers the
//! operation that produced it so the adjoints can be replayed in reverse.
//! The tape is single-owner and never shared across threads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layer::{Activation, Layer, Linear, Slot};
use super::{sigmoid, softmax, PROB_EPS};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Stable name of one parameter tensor: which network (`scope`), which
/// layer inside it, and which slot inside the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub scope: u16,
    pub layer: u32,
    pub slot: Slot,
}

impl ParamId {
    pub fn new(scope: u16, layer: usize, slot: Slot) -> Self {
        ParamId {
            scope,
            layer: layer as u32,
            slot,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
        rows: Vec<usize>,
    },
    SigmoidBce {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    vars: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// Adjoint of any node, including constant inputs.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose adjoint is still tracked (so input gradients are
    /// available) but which is not a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = tensor::linear(&self.value(x).as_matrix(), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean of `-ln p[label]` over the selected rows of `softmax(logits)`,
    /// with `p` clamped to `[ε, 1-ε]`. No selected rows gives a zero loss
    /// with a zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], rows: Option<&[usize]>) -> Var {
        let z = self.value(logits).as_matrix();
        assert_eq!(z.rows(), labels.len(), "one label per logits row");
        let rows: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..labels.len()).collect(),
        };
        let probs = softmax(&z);
        let value = if rows.is_empty() {
            0.0
        } else {
            let total: f64 = rows.iter().map(|&r| -clamped_log_prob(z.row(r), labels[r])).sum();
            total / rows.len() as f64
        };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                rows,
            },
            rg,
        )
    }

    /// Mean elementwise binary cross-entropy between `σ(target)` (fixed) and
    /// `σ(pred)`, the prediction clamped to `[ε, 1-ε]`.
    pub fn sigmoid_bce(&mut self, target: &Tensor, pred: Var) -> Var {
        let a = self.value(pred);
        assert_eq!(a.len(), target.len(), "bce operand sizes");
        let p = target.map(sigmoid);
        let value = bce_logits_mean(&p, a);
        let rg = self.rg(pred);
        self.push(Tensor::scalar(value), Op::SigmoidBce { pred, target: p }, rg)
    }

    /// Records `layers` applied to `x`. With `scope = Some(s)` each parameter
    /// becomes a leaf named `ParamId { scope: s, layer: first_index + i, .. }`;
    /// with `None` the layers are treated as frozen constants.
    pub fn layers(&mut self, layers: &[Layer], scope: Option<u16>, first_index: usize, x: Var) -> Result<Var> {
        super::layer::check_chain(layers, self.value(x).cols())?;
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            h = self.layer(layer, scope, first_index + i, h);
        }
        Ok(h)
    }

    fn leaf_linear(&mut self, lin: &Linear, scope: Option<u16>, layer: usize, slots: [Slot; 2]) -> (Var, Var) {
        match scope {
            Some(s) => (
                self.param(ParamId::new(s, layer, slots[0]), lin.weight.clone()),
                self.param(ParamId::new(s, layer, slots[1]), lin.bias.clone()),
            ),
            None => (
                self.constant(lin.weight.clone()),
                self.constant(lin.bias.clone()),
            ),
        }
    }

    fn layer(&mut self, layer: &Layer, scope: Option<u16>, index: usize, x: Var) -> Var {
        match layer {
            Layer::Dense { linear, activation } => {
                let (w, b) = self.leaf_linear(linear, scope, index, [Slot::Weight, Slot::Bias]);
                let y = self.linear(x, w, b);
                self.activate(y, *activation)
            }
            Layer::Residual {
                first,
                second,
                activation,
            } => {
                let (w1, b1) = self.leaf_linear(first, scope, index, [Slot::Weight, Slot::Bias]);
                let (w2, b2) =
                    self.leaf_linear(second, scope, index, [Slot::InnerWeight, Slot::InnerBias]);
                let h = self.linear(x, w1, b1);
                let h = self.relu(h);
                let branch = self.linear(h, w2, b2);
                let y = self.add(x, branch);
                self.activate(y, *activation)
            }
        }
    }

    fn activate(&mut self, y: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(y),
            Activation::Identity => y,
        }
    }

    /// Propagates `adjoint · d(loss)` back through the tape.
    pub fn backward(&self, loss: Var, adjoint: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(adjoint));
        let mut params = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                adj[idx] = None;
                continue;
            }
            let Some(g) = adj[idx].clone() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    params
                        .entry(*id)
                        .and_modify(|t: &mut Tensor| t.add_assign(&g))
                        .or_insert_with(|| g.clone());
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x).as_matrix();
                    let (dx, dw, db) = tensor::linear_backward(
                        &xv,
                        self.value(*w),
                        &g,
                        self.rg(*x),
                        self.rg(*w) || self.rg(*b),
                    );
                    if let Some(dx) = dx {
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut adj, *x, reshape(dx, shape));
                    }
                    if let (Some(dw), Some(db)) = (dw, db) {
                        accumulate(&mut adj, *w, dw);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Relu(a) => {
                    let d = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj, *a, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g.map(|v| v * c));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut adj, *a, self.value(*a).map(|_| s));
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let s = g.data()[0] / t.len() as f64;
                    accumulate(&mut adj, *a, t.map(|_| s));
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    rows,
                } => {
                    let s = g.data()[0];
                    let k = probs.cols();
                    let mut d = vec![0.0; probs.len()];
                    if !rows.is_empty() {
                        let w = s / rows.len() as f64;
                        let z = self.value(*logits).as_matrix();
                        for &r in rows {
                            let pr = probs.row(r);
                            // derivative of the clamped loss vanishes outside (ε, 1-ε)
                            let lp = clamped_log_prob(z.row(r), labels[r]);
                            if lp <= PROB_EPS.ln() || lp >= (-PROB_EPS).ln_1p() {
                                continue;
                            }
                            for c in 0..k {
                                let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                                d[r * k + c] += w * (pr[c] - onehot);
                            }
                        }
                    }
                    let shape = self.value(*logits).shape().to_vec();
                    accumulate(&mut adj, *logits, Tensor::new(shape, d)?);
                }
                Op::SigmoidBce { pred, target } => {
                    let z = self.value(*pred);
                    let s = g.data()[0] / z.len() as f64;
                    let bound = logit_bound();
                    let d = z.zip_map(target, |zv, pv| {
                        if zv.abs() >= bound {
                            0.0
                        } else {
                            s * (sigmoid(zv) - pv)
                        }
                    });
                    accumulate(&mut adj, *pred, d);
                }
            }
        }
        Ok(Gradients { params, vars: adj })
    }
}

fn reshape(t: Tensor, shape: Vec<usize>) -> Tensor {
    Tensor::new(shape, t.into_data()).expect("same element count")
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `ln softmax(z)[label]` clamped to `[ln ε, ln(1-ε)]`, computed in log
/// space so confident rows keep full precision.
pub(crate) fn clamped_log_prob(z: &[f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (z[label] - max - lse).clamp(PROB_EPS.ln(), (-PROB_EPS).ln_1p())
}

/// Logit at which `σ` reaches the clamp `1-ε`.
fn logit_bound() -> f64 {
    ((1.0 - PROB_EPS) / PROB_EPS).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean of `-(p ln q + (1-p) ln(1-q))` with `q = σ(z)` clamped to
/// `[ε, 1-ε]`. Inside the clamp this is `softplus(z) - p·z`, which avoids
/// forming `1 - q`.
pub(crate) fn bce_logits_mean(p: &Tensor, z: &Tensor) -> f64 {
    let bound = logit_bound();
    let (ln_eps, ln_one) = (PROB_EPS.ln(), (-PROB_EPS).ln_1p());
    let total: f64 = p
        .data()
        .iter()
        .zip(z.data())
        .map(|(&p, &z)| {
            if z >= bound {
                -(p * ln_one + (1.0 - p) * ln_eps)
            } else if z <= -bound {
                -(p * ln_eps + (1.0 - p) * ln_one)
            } else {
                softplus(z) - p * z
            }
        })
        .sum();
    total / p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_gradient() {
        let mut tape = Tape::new();
        let id = ParamId::new(0, 0, Slot::Weight);
        let w = tape.param(id, Tensor::scalar(1.7));
        let x = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mul(w, x);
        let grads = tape.backward(loss, 1.0).unwrap();
        assert_eq!(grads.param(id).unwrap().data(), &[3.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let id = ParamId::new(0, 0, Slot::Weight);
        let w = tape.param(id, Tensor::scalar(5.0));
        let two = tape.constant(Tensor::scalar(2.0));
        let d = tape.sub(w, two);
        let sq = tape.mul(d, d);
        let grads = tape.backward(sq, 1.0).unwrap();
        assert_eq!(grads.param(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v, 1.0), Err(Error::NotScalar(_))));
    }

    #[test]
    fn loss_adjoint_scales_gradients() {
        let mut tape = Tape::new();
        let id = ParamId::new(0, 0, Slot::Bias);
        let w = tape.param(id, Tensor::vector(vec![1.0, -2.0]));
        let s = tape.sum(w);
        let g = tape.backward(s, 2.5).unwrap();
        assert_eq!(g.param(id).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let x = tape.input(Tensor::scalar(2.0));
        let y = tape.mul(c, x);
        let g = tape.backward(y, 1.0).unwrap();
        assert!(g.var(c).is_none());
        assert_eq!(g.var(x).unwrap().data(), &[4.0]);
    }
}
