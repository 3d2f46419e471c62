//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::cmp::Ordering;

use ecc_core::metrics::{ParetoPoint, Sense};
use ecc_core::nn::{Activation, Layer, ParamId, Tape};
use ecc_core::Tensor;
use rand::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to a relu kink are resampled so the
/// finite difference never straddles one.
pub const KINK_MARGIN: f64 = 1e-3;

const SCOPE: u16 = 7;

/// A small network plus a loss built from it: cross-entropy on the logits
/// over `rows` and a weighted sigmoid BCE against `target` at layer `tap`.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub layers: Vec<Layer>,
    pub input: Tensor,
    pub labels: Vec<usize>,
    pub rows: Option<Vec<usize>>,
    pub tap: usize,
    pub target: Tensor,
    pub kd_weight: f64,
}

fn matvec(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| b.data()[o] + (0..inp).map(|i| w.data()[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

/// Smallest |pre-activation| over every relu in the network, every row.
pub fn relu_margin(layers: &[Layer], input: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    for r in 0..input.rows() {
        let mut h = input.row(r).to_vec();
        for layer in layers {
            let pre = match layer {
                Layer::Dense { linear, activation } => {
                    let z = matvec(&linear.weight, &linear.bias, &h);
                    if *activation == Activation::Relu {
                        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                    }
                    (z, *activation)
                }
                Layer::Residual {
                    first,
                    second,
                    activation,
                } => {
                    let a = matvec(&first.weight, &first.bias, &h);
                    margin = a.iter().fold(margin, |m, v| m.min(v.abs()));
                    let a: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
                    let z: Vec<f64> = matvec(&second.weight, &second.bias, &a)
                        .iter()
                        .zip(&h)
                        .map(|(o, i)| i + o)
                        .collect();
                    if *activation == Activation::Relu {
                        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                    }
                    (z, *activation)
                }
            };
            h = match pre.1 {
                Activation::Relu => pre.0.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => pre.0,
            };
        }
    }
    margin
}

fn act<R: Rng>(rng: &mut R) -> Activation {
    if rng.random_bool(0.7) {
        Activation::Relu
    } else {
        Activation::Identity
    }
}

fn random_layers<R: Rng>(rng: &mut R, input_dim: usize, classes: usize) -> Vec<Layer> {
    let hidden = rng.random_range(0..=3);
    let mut layers = Vec::new();
    let mut width = input_dim;
    for _ in 0..hidden {
        if rng.random_bool(0.4) {
            layers.push(Layer::residual(width, act(rng), rng));
        } else {
            let out = rng.random_range(1..=16);
            layers.push(Layer::dense(width, out, act(rng), rng));
            width = out;
        }
    }
    layers.push(Layer::dense(width, classes, Activation::Identity, rng));
    // random biases so that relus do not all sit at the same offset
    for layer in &mut layers {
        for (_, t) in layer.params_mut() {
            if t.shape().len() == 1 {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
    }
    layers
}

fn random_input<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Tensor {
    Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// Draws a network of at most four layers and width at most 16, and a
/// batch whose relu pre-activations all stay at least
/// [`KINK_MARGIN`] away from zero.
pub fn random_case<R: Rng>(rng: &mut R) -> GradCase {
    loop {
        let input_dim = rng.random_range(1..=16);
        let classes = rng.random_range(2..=4);
        let batch = rng.random_range(1..=4);
        let layers = random_layers(rng, input_dim, classes);
        let mut input = random_input(rng, batch, input_dim);
        let mut tries = 0;
        while relu_margin(&layers, &input) < KINK_MARGIN && tries < 50 {
            input = random_input(rng, batch, input_dim);
            tries += 1;
        }
        if relu_margin(&layers, &input) < KINK_MARGIN {
            continue;
        }
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let rows = if rng.random_bool(0.5) {
            None
        } else {
            Some((0..batch).filter(|_| rng.random_bool(0.6)).collect())
        };
        let tap = rng.random_range(0..layers.len());
        let tap_dim = layers[tap].out_dim();
        let target = random_input(rng, batch, tap_dim);
        let kd_weight = rng.random_range(0.0..2.0);
        return GradCase {
            layers,
            input,
            labels,
            rows,
            tap,
            target,
            kd_weight,
        };
    }
}

/// Loss value and, if `grads`, the analytic gradients of every parameter
/// (in `params_mut` order per layer) and of the input.
fn loss_and_grads(case: &GradCase, layers: &[Layer], input: &Tensor, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let head = tape.layers(&layers[..=case.tap], Some(SCOPE), 0, x).unwrap();
    let logits = tape.layers(&layers[case.tap + 1..], Some(SCOPE), case.tap + 1, head).unwrap();
    let ce = tape.cross_entropy(logits, &case.labels, case.rows.as_deref());
    let kd = tape.sigmoid_bce(&case.target, head);
    let kd = tape.scale(kd, case.kd_weight);
    let loss = tape.add(ce, kd);
    let value = tape.value(loss).item().unwrap();
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss, 1.0).unwrap();
    let mut out = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        for (slot, t) in layer.params() {
            let gt = g.param(ParamId::new(SCOPE, i, slot)).unwrap();
            assert_eq!(gt.shape(), t.shape());
            out.push(gt.data().to_vec());
        }
    }
    out.push(g.var(x).unwrap().data().to_vec());
    (value, out)
}

/// Relative error with a small absolute floor so that gradients which are
/// zero up to rounding do not blow up the ratio.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter and input coordinate.
#[allow(clippy::needless_range_loop)]
pub fn grad_check(case: &GradCase) -> f64 {
    let (_, analytic) = loss_and_grads(case, &case.layers, &case.input, true);
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for li in 0..case.layers.len() {
        let slots = case.layers[li].params().len();
        for si in 0..slots {
            let len = case.layers[li].params()[si].1.len();
            for e in 0..len {
                let mut plus = case.layers.clone();
                plus[li].params_mut()[si].1.data_mut()[e] += FD_STEP;
                let mut minus = case.layers.clone();
                minus[li].params_mut()[si].1.data_mut()[e] -= FD_STEP;
                let fp = loss_and_grads(case, &plus, &case.input, false).0;
                let fm = loss_and_grads(case, &minus, &case.input, false).0;
                worst = worst.max(rel_err(analytic[k][e], (fp - fm) / (2.0 * FD_STEP)));
            }
            k += 1;
        }
    }
    for e in 0..case.input.len() {
        let mut plus = case.input.clone();
        plus.data_mut()[e] += FD_STEP;
        let mut minus = case.input.clone();
        minus.data_mut()[e] -= FD_STEP;
        let fp = loss_and_grads(case, &case.layers, &plus, false).0;
        let fm = loss_and_grads(case, &case.layers, &minus, false).0;
        worst = worst.max(rel_err(analytic[k][e], (fp - fm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Random gradient bundle with `p` vectors of dimension `d`.
pub fn random_bundle<R: Rng>(rng: &mut R, p: usize, d: usize) -> Vec<Vec<f64>> {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    (0..p)
        .map(|_| (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Random labelled point set. Values come from a coarse lattice half the
/// time so that ties and duplicates are common.
pub fn random_points<R: Rng>(rng: &mut R, n: usize) -> Vec<ParetoPoint> {
    let k = rng.random_range(1..=3);
    let senses: Vec<Sense> = (0..k)
        .map(|_| if rng.random_bool(0.5) { Sense::Maximize } else { Sense::Minimize })
        .collect();
    let lattice = rng.random_bool(0.5);
    (0..n)
        .map(|i| {
            let values = (0..k)
                .map(|_| {
                    if lattice {
                        f64::from(rng.random_range(0..6)) / 5.0
                    } else {
                        rng.random_range(-1.0..2.0)
                    }
                })
                .collect();
            ParetoPoint::new(format!("p{i:03}"), values, senses.clone()).unwrap()
        })
        .collect()
}

fn better(s: Sense, a: f64, b: f64) -> bool {
    match s {
        Sense::Maximize => a > b,
        Sense::Minimize => a < b,
    }
}

/// Quadratic reference filter: keep every point no other point dominates,
/// collapse identical vectors to the smallest label, sort by values then
/// label.
pub fn brute_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let dom = |a: &ParetoPoint, b: &ParetoPoint| {
        let no_worse = a
            .values
            .iter()
            .zip(&b.values)
            .zip(&a.senses)
            .all(|((&x, &y), &s)| x == y || better(s, x, y));
        no_worse && a.values != b.values
    };
    let mut kept: Vec<ParetoPoint> = Vec::new();
    for p in points {
        if points.iter().any(|q| dom(q, p)) {
            continue;
        }
        match kept.iter_mut().find(|k| k.values == p.values) {
            Some(k) if p.label < k.label => *k = p.clone(),
            Some(_) => {}
            None => kept.push(p.clone()),
        }
    }
    kept.sort_by(|a, b| {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    kept
}
