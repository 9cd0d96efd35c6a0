//! Dense double-precision tensors and the raw kernels built on them.
//!
//! `Tensor` is the carrier for every batch of inputs, activations, logits,
//! and parameters in the crate. The free functions at the bottom are the
//! shared low-level kernels: the plain inference path and the recording
//! tape both call the same code, so their outputs agree bit for bit.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order, with an optional
/// gradient slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and a flat row-major value buffer.
    ///
    /// Rejects shape/length mismatches and non-finite entries.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite value {bad} in tensor")));
        }
        Ok(Tensor { shape, values, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// Convenience constructor for an `m x n` matrix given by rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("ragged rows in matrix literal".into()));
        }
        Tensor::from_vec(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer. The shape must match the values.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Number of rows when interpreted as a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension when interpreted as a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.values[i * n..(i + 1) * n]
    }
}

/// Minimum `m * k * n` before the matmul kernel fans out over rows.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 32_768;

/// Sequential matrix product: `out[m x n] = a[m x k] * b[k x n]`.
///
/// This is the reference kernel; the parallel variant reproduces it bit for
/// bit because every output element is an independent dot product.
pub fn matmul_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        matmul_row(a_row, b, out_row, n);
    }
}

fn matmul_row(a_row: &[f64], b: &[f64], out_row: &mut [f64], n: usize) {
    for (j, out_v) in out_row.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (kk, &a_v) in a_row.iter().enumerate() {
            acc += a_v * b[kk * n + j];
        }
        *out_v = acc;
    }
}

/// Matrix product, fanning out over output rows when the work is large
/// enough to pay for it. Values are identical to [`matmul_seq`].
#[cfg(feature = "parallel")]
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    use rayon::prelude::*;
    if m * k * n < PAR_MIN_WORK || m < 2 {
        return matmul_seq(a, b, out, m, k, n);
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| matmul_row(a_row, b, out_row, n));
}

#[cfg(not(feature = "parallel"))]
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_seq(a, b, out, m, k, n);
}

/// Row-wise broadcast addition: `out[i, j] = x[i, j] + bias[j]`.
pub fn add_bias(x: &[f64], bias: &[f64], out: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(x.len(), m * n);
    debug_assert_eq!(bias.len(), n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = x[i * n + j] + bias[j];
        }
    }
}

/// Elementwise `max(0, x)`; the subgradient at exactly 0 is taken as 0.
pub fn relu(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// Row-wise `z - logsumexp(z)` with max subtraction, stable for any finite
/// input. Exponentiating a row of the output yields probabilities summing
/// to 1 up to rounding.
pub fn log_softmax(z: &[f64], out: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(z.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &z[i * n..(i + 1) * n];
        let out_row = &mut out[i * n..(i + 1) * n];
        log_softmax_row(row, out_row);
    }
}

pub(crate) fn log_softmax_row(row: &[f64], out_row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out_row.iter_mut().zip(row.iter()) {
        *o = v - lse;
    }
}

/// Transpose of an `m x n` matrix into `n x m`.
pub fn transpose(x: &[f64], out: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(x.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
}
