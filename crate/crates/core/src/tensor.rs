//! Dense row-major matrices of `f64` and parameter initializers.
//!
//! Every tensor is two-dimensional: vectors are `[1, n]` rows and scalars are
//! `[1, 1]`. Empty tensors (`[0, n]`) are allowed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err("tensor", &[&[rows, cols], &[data.len()]]);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    /// Stacks equal-length rows. `cols` is used when `rows` is empty.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let cols = rows.first().map_or(cols, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return shape_err("from_rows", &[&[cols], &[r.len()]]);
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row_slice(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &Tensor, k: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.rows() {
            return shape_err("matmul", &[self.shape(), other.shape()]);
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        matmul_into(&self.data, &other.data, &mut out, n, k, m);
        Tensor::new(n, m, out)
    }
}

/// `out[n, m] += a[n, k] · b[k, m]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (oj, bj) in o.iter_mut().zip(brow) {
                *oj += x * bj;
            }
        }
    }
}

/// `out[n, m] += a[n, k] · b[m, k]ᵀ`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, m] += a[n, k]ᵀ · b[n, m]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let o = &mut out[p * m..(p + 1) * m];
            for (oj, bj) in o.iter_mut().zip(brow) {
                *oj += x * bj;
            }
        }
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (rows + cols))`.
    GlorotUniform,
    Zeros,
    Constant(f64),
}

pub fn init_params<R: Rng + ?Sized>(rows: usize, cols: usize, scheme: Init, rng: &mut R) -> Tensor {
    match scheme {
        Init::GlorotUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor {
                shape: vec![rows, cols],
                data,
            }
        }
        Init::Zeros => Tensor::zeros(rows, cols),
        Init::Constant(v) => Tensor::filled(rows, cols, v),
    }
}
