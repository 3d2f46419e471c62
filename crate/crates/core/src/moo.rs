//! Minimum-norm point in the convex hull of a set of gradients.
//!
//! For objectives `h_1..h_p` with gradients `g_i`, the weights
//! `α* = argmin_{α ∈ Δ_p} ‖Σ α_i g_i‖²` give a combined direction `ḡ` with
//! `⟨ḡ, g_j⟩ ≥ ‖ḡ‖² ≥ 0` for every `j`: stepping along `-ḡ` never increases
//! any objective to first order, and `ḡ = 0` marks a Pareto-stationary point.
//!
//! Two objectives use the closed form; more use Frank–Wolfe with exact line
//! search. [`grid_oracle`] brute-forces the simplex for verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::dot;

/// Slack applied to the descent inequality to absorb rounding.
pub const DESCENT_SLACK: f64 = 1e-9;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_FW_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    grads: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        if grads.len() < 2 {
            return Err(Error::usage(format!("need at least 2 gradients, got {}", grads.len())));
        }
        let d = grads[0].len();
        if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| g.len() != d) {
            return Err(Error::usage(format!("gradient {i} has dimension {}, expected {d}", g.len())));
        }
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::usage("gradient bundle contains non-finite entries"));
        }
        Ok(GradientBundle { grads })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    /// `Σ α_i g_i`.
    pub fn combine(&self, alpha: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (g, &a) in self.grads.iter().zip(alpha) {
            for (o, v) in out.iter_mut().zip(g) {
                *o += a * v;
            }
        }
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn gram(&self) -> Vec<Vec<f64>> {
        let p = self.len();
        let mut m = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in i..p {
                let v = dot(&self.grads[i], &self.grads[j]);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }
}

/// Point of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let s: f64 = alpha.iter().sum();
        if alpha.iter().any(|&a| a.is_nan() || a < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!("{alpha:?} is not on the simplex")));
        }
        Ok(SimplexWeights(alpha))
    }

    pub fn uniform(p: usize) -> Self {
        SimplexWeights(vec![1.0 / p as f64; p])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinNorm {
    pub weights: SimplexWeights,
    pub combined: Vec<f64>,
    pub norm_sq: f64,
    /// Frank–Wolfe iterations used; 0 for the closed form.
    pub iterations: usize,
    pub converged: bool,
}

pub fn solve_min_norm(bundle: &GradientBundle, tol: f64) -> Result<MinNorm> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::usage("tolerance must be positive"));
    }
    let p = bundle.len();
    if bundle.grads.iter().flatten().all(|&v| v == 0.0) {
        return Ok(MinNorm {
            weights: SimplexWeights::uniform(p),
            combined: vec![0.0; bundle.dim()],
            norm_sq: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let (alpha, iterations, converged) = if p == 2 {
        let a = two_point(&bundle.grads[0], &bundle.grads[1]);
        (vec![a, 1.0 - a], 0, true)
    } else {
        frank_wolfe(&bundle.gram(), tol)
    };
    let combined = bundle.combine(&alpha);
    let norm_sq = dot(&combined, &combined);
    Ok(MinNorm {
        weights: SimplexWeights(alpha),
        combined,
        norm_sq,
        iterations,
        converged,
    })
}

/// Weight on `g1` minimizing `‖a·g1 + (1-a)·g2‖²` over `a ∈ [0, 1]`.
fn two_point(g1: &[f64], g2: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in g1.iter().zip(g2) {
        let d = b - a;
        num += d * b;
        den += d * d;
    }
    if den == 0.0 {
        return 0.5;
    }
    (num / den).clamp(0.0, 1.0)
}

/// Frank–Wolfe on `f(α) = αᵀMα` over the simplex, working entirely in the
/// Gram matrix `M`.
fn frank_wolfe(m: &[Vec<f64>], tol: f64) -> (Vec<f64>, usize, bool) {
    let p = m.len();
    // start from the shortest vertex
    let start = (0..p)
        .min_by(|&a, &b| m[a][a].total_cmp(&m[b][b]))
        .expect("p >= 2");
    let mut alpha = vec![0.0; p];
    alpha[start] = 1.0;
    // mv = M·α, the inner products ⟨g_i, ḡ⟩
    let mut mv: Vec<f64> = (0..p).map(|i| m[i][start]).collect();

    for it in 0..MAX_FW_ITERS {
        let f = dot(&alpha, &mv);
        let t = (0..p)
            .min_by(|&a, &b| mv[a].total_cmp(&mv[b]))
            .expect("p >= 2");
        let gap = 2.0 * (f - mv[t]);
        if gap < tol {
            return (alpha, it, true);
        }
        // exact line search towards vertex t
        let den = f - 2.0 * mv[t] + m[t][t];
        if den <= 0.0 {
            return (alpha, it, true);
        }
        let gamma = ((f - mv[t]) / den).clamp(0.0, 1.0);
        for (i, a) in alpha.iter_mut().enumerate() {
            *a *= 1.0 - gamma;
            if i == t {
                *a += gamma;
            }
        }
        for (i, v) in mv.iter_mut().enumerate() {
            *v = (1.0 - gamma) * *v + gamma * m[i][t];
        }
    }
    (alpha, MAX_FW_ITERS, false)
}

/// Exhaustive search over the simplex lattice with spacing `step`.
pub fn grid_oracle(bundle: &GradientBundle, step: f64) -> Result<(SimplexWeights, f64)> {
    let p = bundle.len();
    if p > 3 {
        return Err(Error::usage(format!("grid oracle supports p <= 3, got {p}")));
    }
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::usage(format!("grid step must be in (0, 0.01], got {step}")));
    }
    let k = (1.0 / step).round() as usize;
    let norm_at = |alpha: &[f64]| {
        let v = bundle.combine(alpha);
        dot(&v, &v)
    };
    let mut best = (vec![1.0 / p as f64; p], f64::INFINITY);
    let mut consider = |alpha: Vec<f64>| {
        let n = norm_at(&alpha);
        if n < best.1 {
            best = (alpha, n);
        }
    };
    if p == 2 {
        for i in 0..=k {
            let a = i as f64 / k as f64;
            consider(vec![a, 1.0 - a]);
        }
    } else {
        for i in 0..=k {
            for j in 0..=(k - i) {
                let a = i as f64 / k as f64;
                let b = j as f64 / k as f64;
                consider(vec![a, b, (k - i - j) as f64 / k as f64]);
            }
        }
    }
    Ok((SimplexWeights(best.0), best.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentCheck {
    pub holds: bool,
    pub inner_products: Vec<f64>,
}

/// Checks `⟨combined, g_j⟩ ≥ -1e-9` for every gradient in the bundle.
pub fn check_descent(bundle: &GradientBundle, combined: &[f64]) -> DescentCheck {
    let inner_products: Vec<f64> = bundle.grads.iter().map(|g| dot(g, combined)).collect();
    DescentCheck {
        holds: inner_products.iter().all(|&v| v >= -DESCENT_SLACK),
        inner_products,
    }
}
