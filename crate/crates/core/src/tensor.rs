//! Dense row-major f64 tensors.
//!
//! All numerics in this crate run on these tensors with 64-bit arithmetic and
//! a fixed, sequential accumulation order so that identical inputs always
//! produce bit-identical outputs.

use crate::error::{Error, Result};

/// A dense tensor of 64-bit reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                numel
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("tensor holds a non-finite entry"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// 2-D constructor from nested rows; rows must have equal lengths.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Borrow row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in a slice, lowest index winning ties.
    pub fn argmax_row(row: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// `y[b,o] = sum_i x[b,i] * w[o,i]` — the dense-layer product with the weight
/// matrix stored `[out, in]`. Accumulation is sequential over `i`.
pub fn matmul_nt(x: &Tensor, w: &Tensor) -> Tensor {
    let (b, i) = (x.rows(), x.cols());
    let (o, wi) = (w.rows(), w.cols());
    debug_assert_eq!(i, wi, "matmul_nt inner dims");
    let mut out = Tensor::zeros(vec![b, o]);
    for bi in 0..b {
        let xr = x.row(bi);
        let or = out.row_mut(bi);
        for oi in 0..o {
            let wr = w.row(oi);
            let mut acc = 0.0;
            for k in 0..i {
                acc += xr[k] * wr[k];
            }
            or[oi] = acc;
        }
    }
    out
}

/// Number of multiply-accumulates `matmul_nt(x, w)` performs.
pub fn matmul_macs(x: &Tensor, w: &Tensor) -> u64 {
    (x.rows() * x.cols() * w.rows()) as u64
}

/// Stable log-softmax of each row of a `[B,C]` tensor.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let (b, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(vec![b, c]);
    for bi in 0..b {
        let row = logits.row(bi);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        let or = out.row_mut(bi);
        for (o, &v) in or.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Softmax of a probability vector (single row).
pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Euclidean distance between two equal-length slices.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}
