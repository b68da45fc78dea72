//! Dense row-major `f64` tensors and the handful of kernels the toolkit needs.
//!
//! Kernels here are shared by the eager paths (sampling without gradients) and
//! by the recorded ops in [`crate::autodiff`], so both produce bit-identical
//! values for the same inputs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format {
                what: "tensor",
                msg: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    /// Leading dimension, treating everything after it as one row.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.shape[0].max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &[self.data.len()], &[n]));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_map(other, "axpby", |x, y| a * x + b * y)
    }

    /// Matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        if rhs.rows() != k {
            return Err(Error::shape("matmul", &[k, rhs.cols()], rhs.shape()));
        }
        let n = rhs.cols();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &rhs.data, false, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self^T · rhs` for `[k, m]` and `[k, n]`.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, m) = (self.rows(), self.cols());
        if rhs.rows() != k {
            return Err(Error::shape("t_matmul", &[k, rhs.cols()], rhs.shape()));
        }
        let n = rhs.cols();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, true, &rhs.data, false, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · rhs^T` for `[m, k]` and `[n, k]`.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        if rhs.cols() != k {
            return Err(Error::shape("matmul_t", &[rhs.rows(), k], rhs.shape()));
        }
        let n = rhs.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &rhs.data, true, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let n = self.cols();
        if bias.len() != n {
            return Err(Error::shape("add_row", &[n], bias.shape()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column sums of an `[m, n]` matrix, as a length-`n` vector.
    pub fn sum_rows(&self) -> Tensor {
        let n = self.cols();
        let mut out = vec![0.0; n];
        for row in self.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![n],
            data: out,
        }
    }

    /// Places `[m, p]` and `[m, q]` (or `[1, q]`, broadcast) side by side.
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, p) = (self.rows(), self.cols());
        let q = rhs.cols();
        let broadcast = rhs.rows() == 1;
        if !broadcast && rhs.rows() != m {
            return Err(Error::shape("concat_cols", &[m, q], rhs.shape()));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&self.data[i * p..(i + 1) * p]);
            let r = if broadcast { 0 } else { i };
            out.extend_from_slice(&rhs.data[r * q..(r + 1) * q]);
        }
        Ok(Tensor {
            shape: vec![m, p + q],
            data: out,
        })
    }

    /// `out[k] = self[index[k]]` with the given output shape.
    pub fn gather(&self, index: &[usize], shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", &[index.len()], shape));
        }
        let data = index.iter().map(|&i| self.data[i]).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// `out[index[k]] += weight[k] * self[k]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, index: &[usize], weight: &[f64], shape: &[usize]) -> Result<Tensor> {
        if index.len() != self.len() || weight.len() != self.len() {
            return Err(Error::shape("scatter_add", &[index.len()], self.shape()));
        }
        let mut out = Tensor::zeros(shape);
        for ((&i, &w), &v) in index.iter().zip(weight).zip(&self.data) {
            out.data[i] += w * v;
        }
        Ok(out)
    }
}

/// `c = op(a) · op(b)` where `op` optionally transposes a row-major operand.
///
/// `a` is `[m, k]` (stored `[k, m]` when `ta`), `b` is `[k, n]` (stored
/// `[n, k]` when `tb`), `c` is `[m, n]` and is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents described above; the
    // callers size `a`, `b`, `c` from the same m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data[i * k + l] * b.data[l * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &Tensor) -> Tensor {
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out).unwrap()
    }

    fn seq(m: usize, n: usize, shift: f64) -> Tensor {
        let data = (0..m * n).map(|i| ((i as f64) * 0.37 + shift).sin()).collect();
        Tensor::new(vec![m, n], data).unwrap()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = seq(5, 7, 0.1);
        let b = seq(7, 3, 0.9);
        let want = naive(&a, &b);
        for (x, y) in a.matmul(&b).unwrap().data.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = transpose(&a);
        for (x, y) in at.t_matmul(&b).unwrap().data.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = transpose(&b);
        for (x, y) in a.matmul_t(&bt).unwrap().data.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_product_is_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(seq(2, 3, 0.0).matmul(&seq(2, 3, 0.0)).is_err());
    }

    #[test]
    fn gather_then_scatter_counts_degrees() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let g = x.gather(&[0, 1, 1, 2], &[4]).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 2.0, 3.0]);
        let s = g.scatter_add(&[0, 1, 1, 2], &[1.0, 0.5, 0.5, 1.0], &[3]).unwrap();
        assert_eq!(s.data(), x.data());
    }

    #[test]
    fn concat_broadcasts_single_row() {
        let a = seq(3, 2, 0.0);
        let b = Tensor::new(vec![1, 2], vec![7.0, 8.0]).unwrap();
        let c = a.concat_cols(&b).unwrap();
        assert_eq!(c.shape(), &[3, 4]);
        assert_eq!(&c.row(2)[2..], &[7.0, 8.0]);
    }
}
