//! Dense row-major `f64` tensors and the matrix kernels the tape is built on.

use crate::error::{Error, Result};

/// A dense tensor. Every operation in this crate works on rank-2 tensors;
/// vectors are `1 × n` or `n × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {r} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
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

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// `out += a (n×m) · b (m×p)`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let out_row = &mut out[i * p..(i + 1) * p];
        for (j, &a_ij) in a[i * m..(i + 1) * m].iter().enumerate() {
            if a_ij == 0.0 {
                continue;
            }
            let b_row = &b[j * p..(j + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ij * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is `m×n` and `b` is `m×p`; `out` is `n×p`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for r in 0..m {
        let a_row = &a[r * n..(r + 1) * n];
        let b_row = &b[r * p..(r + 1) * p];
        for (i, &a_ri) in a_row.iter().enumerate() {
            if a_ri == 0.0 {
                continue;
            }
            let out_row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is `n×m` and `b` is `p×m`; `out` is `n×p`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        for j in 0..p {
            let b_row = &b[j * m..(j + 1) * m];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * p + j] += dot;
        }
    }
}
