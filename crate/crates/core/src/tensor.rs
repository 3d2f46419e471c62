//! Dense row-major `f64` arrays.
//!
//! Everything in the crate is either a vector (`[n]`) or a batch matrix
//! (`[rows, cols]`), so the kernels here only cover those two ranks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::usage(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::usage(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix; panics if `data` has the wrong length.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count for a matrix, 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View the data as a `[rows, cols]` matrix with the same layout.
    pub fn as_matrix(&self) -> Tensor {
        Tensor {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    /// Copy of the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y = x · Wᵀ + b` for `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
///
/// Each output element is accumulated in input order and the bias is added
/// last, so a row produces the same bits whether it is evaluated alone or
/// inside a batch.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let rows = x.rows();
    let (out, inp) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.cols(), inp);
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &x.data[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        for (o, slot) in yr.iter_mut().enumerate() {
            *slot = dot(&w.data[o * inp..(o + 1) * inp], xr) + b.data[o];
        }
    }
    Tensor {
        shape: vec![rows, out],
        data: y,
    }
}

/// Adjoints of [`linear`]: returns `(dx, dW, db)` given `dy: [rows, out]`.
pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let rows = x.rows();
    let (out, inp) = (w.shape[0], w.shape[1]);
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; rows * inp];
        for r in 0..rows {
            let dxr = &mut dx[r * inp..(r + 1) * inp];
            for o in 0..out {
                let g = dy.data[r * out + o];
                if g == 0.0 {
                    continue;
                }
                let wr = &w.data[o * inp..(o + 1) * inp];
                for (d, wv) in dxr.iter_mut().zip(wr) {
                    *d += g * wv;
                }
            }
        }
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        }
    });
    let (dw, db) = if need_dw {
        let mut dw = vec![0.0; out * inp];
        let mut db = vec![0.0; out];
        for r in 0..rows {
            let xr = &x.data[r * inp..(r + 1) * inp];
            for o in 0..out {
                let g = dy.data[r * out + o];
                db[o] += g;
                if g == 0.0 {
                    continue;
                }
                let dwr = &mut dw[o * inp..(o + 1) * inp];
                for (d, xv) in dwr.iter_mut().zip(xr) {
                    *d += g * xv;
                }
            }
        }
        (
            Some(Tensor {
                shape: vec![out, inp],
                data: dw,
            }),
            Some(Tensor {
                shape: vec![out],
                data: db,
            }),
        )
    } else {
        (None, None)
    };
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn linear_matches_hand_arithmetic() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]);
        let y = linear(&x, &w, &b);
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_row_is_batch_invariant() {
        let w = Tensor::matrix(3, 2, vec![0.1, -0.7, 1.3, 0.2, -2.0, 0.9]);
        let b = Tensor::vector(vec![0.3, -0.1, 0.05]);
        let x = Tensor::matrix(2, 2, vec![0.37, 1.9, -4.2, 0.01]);
        let batch = linear(&x, &w, &b);
        for r in 0..2 {
            let single = linear(&x.select_rows(&[r]), &w, &b);
            assert_eq!(single.data(), batch.row(r));
        }
    }
}
