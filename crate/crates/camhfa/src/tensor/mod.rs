//! Dense f64 tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a shape header over a flat row-major buffer. The forward
//! ops here are deliberately naive (triple-loop matmul, max-subtracted
//! softmax) so that results are deterministic and easy to cross-check.
//! [`tape::GradTape`] records a forward pass and replays it in reverse for
//! gradients; [`check::finite_difference_gradient`] is the numeric oracle
//! those gradients are validated against.

mod check;
mod tape;

pub use check::{finite_difference_gradient, max_relative_error};
pub use tape::{GradTape, NodeId};

use crate::error::{Error, Result};

/// Dense tensor: dimension sizes plus row-major f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the shape accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(&mut f).collect();
        Tensor { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Softmax along `axis` (0 or 1 for 2-D tensors, 0 for 1-D), computed
    /// with max subtraction.
    pub fn softmax(&self, axis: usize) -> Tensor {
        match self.shape.len() {
            1 => {
                assert_eq!(axis, 0, "softmax axis {axis} out of range for 1-D tensor");
                let mut out = self.data.clone();
                softmax_slice(&mut out);
                Tensor {
                    shape: self.shape.clone(),
                    data: out,
                }
            }
            2 => {
                let (rows, cols) = (self.shape[0], self.shape[1]);
                let mut out = vec![0.0; rows * cols];
                match axis {
                    // Down each column.
                    0 => {
                        let mut column = vec![0.0; rows];
                        for c in 0..cols {
                            for r in 0..rows {
                                column[r] = self.data[r * cols + c];
                            }
                            softmax_slice(&mut column);
                            for r in 0..rows {
                                out[r * cols + c] = column[r];
                            }
                        }
                    }
                    // Across each row.
                    1 => {
                        for r in 0..rows {
                            let row = &mut out[r * cols..(r + 1) * cols];
                            row.copy_from_slice(&self.data[r * cols..(r + 1) * cols]);
                            softmax_slice(row);
                        }
                    }
                    _ => panic!("softmax axis {axis} out of range for 2-D tensor"),
                }
                Tensor {
                    shape: self.shape.clone(),
                    data: out,
                }
            }
            n => panic!("softmax not implemented for {n}-D tensors"),
        }
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose requires a 2-D tensor");
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Tensor {
            shape: vec![cols, rows],
            data: out,
        }
    }

    pub fn dot(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.data.len(), rhs.data.len(), "dot length mismatch");
        self.data
            .iter()
            .zip(rhs.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// c[i,j] = sum_k a[i,k] * b[k,j], accumulated in ascending k order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut sum = 0.0;
            for p in 0..k {
                sum += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = sum;
        }
    }
}

/// In-place stable softmax over one slice.
pub(crate) fn softmax_slice(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}
