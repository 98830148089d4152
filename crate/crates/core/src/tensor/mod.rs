//! Dense f64 tensors and a reverse-mode tape.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{NcvError, Result};

/// Row-major dense array of `f64` with a fixed shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NcvError::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NcvError::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NcvError::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Splits off the trailing axis: `(rows, cols)` view of the data.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain `[n×k]·[k×p]` product into `out` (which must be zeroed).
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for (l, &a_il) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            for (o, &b_lj) in row.iter_mut().zip(&b[l * p..(l + 1) * p]) {
                *o += a_il * b_lj;
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out += a · bᵀ` where `a: [n×p]`, `b: [k×p]`, `out: [n×k]`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, p: usize, k: usize) {
    for i in 0..n {
        let a_row = &a[i * p..(i + 1) * p];
        for l in 0..k {
            let b_row = &b[l * p..(l + 1) * p];
            out[i * k + l] += dot(a_row, b_row);
        }
    }
}

/// `out += aᵀ · g` where `a: [n×k]`, `g: [n×p]`, `out: [k×p]`.
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let g_row = &g[i * p..(i + 1) * p];
        for (l, &a_il) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            for (o, &gv) in out[l * p..(l + 1) * p].iter_mut().zip(g_row) {
                *o += a_il * gv;
            }
        }
    }
}
