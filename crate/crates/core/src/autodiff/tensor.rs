use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// `shape.iter().product() == data.len()` always holds. Rank 1 tensors are
/// vectors, rank 2 tensors are matrices and the empty shape is a scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(dim_err(
                "Tensor::new",
                "data",
                &[data.len()],
                format!("{n} elements for shape {shape:?}"),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
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

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, context: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(
                "zip_map",
                "rhs",
                &other.shape,
                format!("{:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm2(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Euclidean distance between two tensors of identical shape.
    pub fn dist2(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Matrix-vector product `self · v` for a matrix `self`.
    pub fn matvec(&self, v: &Self) -> Result<Self> {
        if !self.is_matrix() {
            return Err(dim_err("matvec", "matrix", &self.shape, "rank 2"));
        }
        let (m, n) = (self.rows(), self.cols());
        if v.shape != [n] {
            return Err(dim_err("matvec", "vector", &v.shape, format!("[{n}]")));
        }
        let data = (0..m)
            .map(|r| {
                self.data[r * n..(r + 1) * n]
                    .iter()
                    .zip(&v.data)
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect();
        Ok(Self {
            shape: vec![m],
            data,
        })
    }

    /// Transposed product `selfᵀ · v`.
    pub fn matvec_t(&self, v: &Self) -> Result<Self> {
        if !self.is_matrix() {
            return Err(dim_err("matvec_t", "matrix", &self.shape, "rank 2"));
        }
        let (m, n) = (self.rows(), self.cols());
        if v.shape != [m] {
            return Err(dim_err("matvec_t", "vector", &v.shape, format!("[{m}]")));
        }
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            let vr = v.data[r];
            for (o, &a) in out.iter_mut().zip(&self.data[r * n..(r + 1) * n]) {
                *o += a * vr;
            }
        }
        Ok(Self {
            shape: vec![n],
            data: out,
        })
    }

    /// Outer product `a ⊗ b` as an `a.len() × b.len()` matrix.
    pub fn outer(a: &Self, b: &Self) -> Self {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for &x in &a.data {
            data.extend(b.data.iter().map(|&y| x * y));
        }
        Self {
            shape: vec![a.len(), b.len()],
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Coordinatewise clamp into `[lo_i, hi_i]`.
    pub fn clamp_to(&self, lo: &[T], hi: &[T]) -> Self {
        let data = self
            .data
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Projection onto the ∞-norm ball of radius `eps` around `center`.
    pub fn project_linf(&self, center: &Self, eps: T) -> Self {
        let data = self
            .data
            .iter()
            .zip(&center.data)
            .map(|(&v, &c)| v.max(c - eps).min(c + eps))
            .collect();
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn linf_dist(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
