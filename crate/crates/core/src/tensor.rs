//! Dense row-major tensors and the forward kernels the models are built from.
//!
//! A tensor of rank `k >= 1` is viewed by most kernels as a matrix of
//! `rows() x cols()`, where `cols()` is the last dimension and `rows()` the
//! product of the others. Every kernel is a pure function and rejects
//! non-finite results.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_f64(vec![m, n], &data)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::of(std * rng.normal())).collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.uniform_in(lo, hi))).collect();
        Self { shape, data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.numel() / c
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Element at a 2-D position.
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Element at a multi-dimensional index, using row-major strides.
    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut offset = 0;
        for (&i, &dim) in index.iter().zip(&self.shape) {
            if i >= dim {
                return None;
            }
            offset = offset * dim + i;
        }
        Some(self.data[offset])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    fn matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            })
        }
    }

    fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .finite(op)
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map("scale", |v| v * s)
    }

    pub fn square(&self) -> Result<Self> {
        self.map("square", |v| v * v)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&self) -> Result<Self> {
        self.map("gelu", gelu_scalar)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Matrix product `[m x k] * [k x p]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix("matmul")?;
        let (k2, p) = other.matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * p..(i + 1) * p];
            for (l, &a) in arow.iter().enumerate() {
                let brow = &other.data[l * p..(l + 1) * p];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, p], out)?.finite("matmul")
    }

    /// `self^T * other` for `[k x m]` and `[k x p]`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.matrix("matmul_tn")?;
        let (k2, p) = other.matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        for l in 0..k {
            let arow = &self.data[l * m..(l + 1) * m];
            let brow = &other.data[l * p..(l + 1) * p];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * p..(i + 1) * p];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, p], out)?.finite("matmul_tn")
    }

    /// `self * other^T` for `[m x k]` and `[p x k]`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix("matmul_nt")?;
        let (p, k2) = other.matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..p {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * p + j] = arow.iter().zip(brow).map(|(&a, &b)| a * b).sum();
            }
        }
        Self::new(vec![m, p], out)?.finite("matmul_nt")
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let c = self.cols();
        if bias.numel() != c || bias.rank() != 1 {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Self::new(self.shape.clone(), out)?.finite("add_row")
    }

    /// Sums over rows, giving a vector of length `cols`.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self {
            shape: vec![c],
            data: out,
        }
    }

    /// Mean over rows, kept as a `[1 x cols]` matrix.
    pub fn mean_rows(&self) -> Result<Self> {
        let n = T::of(self.rows() as f64);
        let mut s = self.sum_rows();
        for v in &mut s.data {
            *v /= n;
        }
        s.shape = vec![1, self.cols()];
        s.finite("mean_rows")
    }

    /// Softmax along the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&self) -> Result<Self> {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::new(self.shape.clone(), out)?.finite("softmax_rows")
    }

    /// Layer normalisation over the last axis followed by the affine map.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let c = self.cols();
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let (mean, inv_std) = row_moments(row, eps);
            for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
                *v = (*v - mean) * inv_std * g + b;
            }
        }
        Self::new(self.shape.clone(), out)?.finite("layer_norm")
    }

    /// Copies the listed rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (n, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            out.extend_from_slice(self.row(i));
        }
        Self::new(vec![idx.len(), c], out)
    }

    /// Zero `[n x cols]` matrix with `self`'s rows written at `idx`.
    pub fn scatter_rows(&self, idx: &[usize], n: usize) -> Result<Self> {
        let c = self.cols();
        if self.rows() != idx.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: self.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![T::zero(); n * c];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            out[i * c..(i + 1) * c].copy_from_slice(self.row(r));
        }
        Self::new(vec![n, c], out)
    }

    /// Zeroes every row not listed in `keep` (which must be sorted).
    pub fn keep_rows(&self, keep: &[usize]) -> Result<Self> {
        let (n, c) = (self.rows(), self.cols());
        if let Some(&bad) = keep.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let mut out = vec![T::zero(); self.numel()];
        for &i in keep {
            out[i * c..(i + 1) * c].copy_from_slice(self.row(i));
        }
        Self::new(self.shape.clone(), out)
    }

    /// Multi-head scaled dot-product scores.
    ///
    /// `q` is `[nq x h*d]`, `k` is `[nk x h*d]`; the result is `[h x nq x nk]`
    /// with entries `q_i . k_j / sqrt(d)` per head.
    pub fn attn_scores(q: &Self, k: &Self, heads: usize) -> Result<Self> {
        let (nq, width) = q.matrix("attn_scores")?;
        let (nk, width2) = k.matrix("attn_scores")?;
        if width != width2 || heads == 0 || width % heads != 0 {
            return Err(Error::Shape {
                op: "attn_scores",
                lhs: q.shape.clone(),
                rhs: k.shape.clone(),
            });
        }
        let d = width / heads;
        let scale = T::one() / T::of(d as f64).sqrt();
        let mut out = vec![T::zero(); heads * nq * nk];
        for h in 0..heads {
            for i in 0..nq {
                let qi = &q.data[i * width + h * d..i * width + (h + 1) * d];
                for j in 0..nk {
                    let kj = &k.data[j * width + h * d..j * width + (h + 1) * d];
                    let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    out[(h * nq + i) * nk + j] = dot * scale;
                }
            }
        }
        Self::new(vec![heads, nq, nk], out)?.finite("attn_scores")
    }

    /// Applies per-head attention weights `[h x nq x nk]` to values `[nk x h*d]`.
    pub fn attn_apply(p: &Self, v: &Self) -> Result<Self> {
        let (nk, width) = v.matrix("attn_apply")?;
        if p.rank() != 3 || p.shape[2] != nk || p.shape[0] == 0 || width % p.shape[0] != 0 {
            return Err(Error::Shape {
                op: "attn_apply",
                lhs: p.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let (heads, nq) = (p.shape[0], p.shape[1]);
        let d = width / heads;
        let mut out = vec![T::zero(); nq * width];
        for h in 0..heads {
            for i in 0..nq {
                let prow = &p.data[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let orow = &mut out[i * width + h * d..i * width + (h + 1) * d];
                for (j, &w) in prow.iter().enumerate() {
                    let vj = &v.data[j * width + h * d..j * width + (h + 1) * d];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        Self::new(vec![nq, width], out)?.finite("attn_apply")
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of the exact GELU.
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Two-pass mean and `1 / sqrt(var + eps)` of a row.
pub(crate) fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let c = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / c;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
    (mean, T::one() / (var + eps).sqrt())
}
