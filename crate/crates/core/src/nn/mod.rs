//! Tensor layers, reverse-mode gradients, FLOPS counting and checkpoints.

pub mod checkpoint;
pub mod layer;
pub mod tape;

pub use layer::{check_chain, flops, forward, forward_trace, Activation, Layer, LayerKind, Linear, Slot};
pub use tape::{Gradients, ParamId, Tape, Var};

use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with the row maximum subtracted before exponentiating.
pub fn softmax(logits: &Tensor) -> Tensor {
    let m = logits.as_matrix();
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let z = m.row(r);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(z.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        for p in &mut out[start..] {
            *p /= total;
        }
    }
    Tensor::matrix(rows, cols, out)
}
