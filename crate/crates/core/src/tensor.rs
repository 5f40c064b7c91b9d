//! Dense row-major f64 tensors.
//!
//! Everything in this crate computes on 64-bit floats; tensors are immutable
//! values once constructed and cheap to clone only when small, so hot paths
//! pass references. Matrix products go through `matrixmultiply`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/value-count contract and that all
    /// entries are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("Tensor::new", "non-finite entry"));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by already-checked arithmetic.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
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
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub(crate) fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(Error::contract("matmul requires rank-2 tensors"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul inner dims: {}x{} @ {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self^T @ rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(Error::contract("t_matmul requires rank-2 tensors"));
        }
        let (k, m) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::contract(format!(
                "t_matmul inner dims: ({}x{})^T @ {}x{}",
                k, m, k2, n
            )));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                1,
                m as isize,
                rhs.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self @ rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(Error::contract("matmul_t requires rank-2 tensors"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul_t inner dims: {}x{} @ ({}x{})^T",
                m, k, n, k2
            )));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                1,
                k2 as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::contract("transpose2 requires rank-2"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul_elem", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * c).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// In-place `self += c * rhs`; shapes must match.
    pub fn axpy(&mut self, c: f64, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::contract(format!(
                "axpy: shape mismatch {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += c * b;
        }
        Ok(())
    }
}
