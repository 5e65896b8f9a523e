//! Dense row-major vectors and matrices, activations and losses.
//!
//! Everything is `f64` and exact-shape: mismatched shapes are programming
//! errors and panic.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// Probabilities fed to a logarithm are clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        Vector(vec![1.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    /// One-hot encoding of `class` over `len` entries.
    pub fn one_hot(len: usize, class: usize) -> Self {
        let mut v = Self::zeros(len);
        v[class] = 1.0;
        v
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        dot(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Vector) {
        assert_eq!(self.len(), other.len(), "axpy: length mismatch");
        axpy(alpha, other, self);
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        Vector(self.iter().zip(other.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        Vector(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    pub fn sum(&self) -> f64 {
        self.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; the first one wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.iter().enumerate() {
            if v > self[best] {
                best = i;
            }
        }
        best
    }

    /// Concatenate several vectors into one.
    pub fn concat(parts: &[&[f64]]) -> Vector {
        let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            out.extend_from_slice(p);
        }
        Vector(out)
    }
}

impl Deref for Vector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl<'a> IntoIterator for &'a Vector {
    type Item = &'a f64;
    type IntoIter = std::slice::Iter<'a, f64>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length does not match {rows}x{cols}");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matvec(&self, v: &[f64]) -> Vector {
        assert_eq!(self.cols, v.len(), "matvec: {}x{} times {}", self.rows, self.cols, v.len());
        Vector((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T v`
    pub fn matvec_t(&self, v: &[f64]) -> Vector {
        assert_eq!(self.rows, v.len(), "matvec_t: ({}x{})^T times {}", self.rows, self.cols, v.len());
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Vector(out)
    }

    /// Rank-one update `self += alpha * u v^T`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!((self.rows, self.cols), (u.len(), v.len()), "add_outer: shape mismatch");
        for (i, &ui) in u.iter().enumerate() {
            let s = alpha * ui;
            if s != 0.0 {
                axpy(s, v, self.row_mut(i));
            }
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Matrix-vector product.
pub fn matvec(m: &Matrix, v: &Vector) -> Vector {
    m.matvec(v)
}

/// `u v^T`
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, &ui) in u.iter().enumerate() {
        for (dst, &vj) in m.row_mut(i).iter_mut().zip(v) {
            *dst = ui * vj;
        }
    }
    m
}

/// Element-wise product of identically shaped operands.
pub trait Hadamard {
    fn hadamard(&self, other: &Self) -> Self;
}

impl Hadamard for Vector {
    fn hadamard(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "hadamard: length mismatch");
        Vector(self.iter().zip(other.iter()).map(|(a, b)| a * b).collect())
    }
}

impl Hadamard for Matrix {
    fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "hadamard: shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }
}

pub fn hadamard<T: Hadamard>(a: &T, b: &T) -> T {
    a.hadamard(b)
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vector {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub fn apply(self, z: &[f64]) -> Vector {
        match self {
            Activation::Sigmoid => Vector(z.iter().map(|&v| sigmoid(v)).collect()),
            Activation::Tanh => Vector(z.iter().map(|v| v.tanh()).collect()),
            Activation::Relu => Vector(z.iter().map(|&v| v.max(0.0)).collect()),
            Activation::Softmax => softmax(z),
            Activation::Identity => Vector(z.to_vec()),
        }
    }

    /// Element-wise derivative at `z`. For softmax this is only the diagonal
    /// of the Jacobian; use [`Activation::backprop`] to chain through it.
    pub fn derivative(self, z: &[f64]) -> Vector {
        match self {
            Activation::Sigmoid => Vector(
                z.iter()
                    .map(|&v| {
                        let s = sigmoid(v);
                        s * (1.0 - s)
                    })
                    .collect(),
            ),
            Activation::Tanh => Vector(
                z.iter()
                    .map(|v| {
                        let t = v.tanh();
                        1.0 - t * t
                    })
                    .collect(),
            ),
            Activation::Relu => Vector(z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()),
            Activation::Softmax => {
                let s = softmax(z);
                s.map(|p| p * (1.0 - p))
            }
            Activation::Identity => Vector::ones(z.len()),
        }
    }

    /// Vector-Jacobian product: given `dE/d(out)` return `dE/dz`, where
    /// `out = self.apply(z)`.
    pub fn backprop(self, z: &[f64], out: &[f64], upstream: &[f64]) -> Vector {
        debug_assert_eq!(out.len(), upstream.len());
        match self {
            Activation::Sigmoid => {
                Vector(out.iter().zip(upstream).map(|(s, g)| g * s * (1.0 - s)).collect())
            }
            Activation::Tanh => {
                Vector(out.iter().zip(upstream).map(|(t, g)| g * (1.0 - t * t)).collect())
            }
            Activation::Relu => Vector(
                z.iter().zip(upstream).map(|(&v, g)| if v > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Activation::Softmax => {
                let inner = dot(out, upstream);
                Vector(out.iter().zip(upstream).map(|(s, g)| s * (g - inner)).collect())
            }
            Activation::Identity => Vector(upstream.to_vec()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "softmax" => Activation::Softmax,
            "identity" => Activation::Identity,
            _ => return None,
        })
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Categorical cross entropy for vector outputs, binary cross entropy for
    /// a single output.
    CrossEntropy,
    /// Mean squared error, averaged over output entries.
    Mse,
}

impl Loss {
    pub fn value(self, y_hat: &[f64], y: &[f64]) -> f64 {
        assert_eq!(y_hat.len(), y.len(), "loss: shape mismatch");
        match self {
            Loss::CrossEntropy if y.len() == 1 => {
                let p = clamp_prob(y_hat[0]);
                -(y[0] * p.ln() + (1.0 - y[0]) * (1.0 - p).ln())
            }
            Loss::CrossEntropy => {
                -y.iter().zip(y_hat).map(|(t, &p)| if *t == 0.0 { 0.0 } else { t * clamp_prob(p).ln() }).sum::<f64>()
            }
            Loss::Mse => {
                y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
            }
        }
    }

    /// `dE/dy_hat`
    pub fn gradient(self, y_hat: &[f64], y: &[f64]) -> Vector {
        assert_eq!(y_hat.len(), y.len(), "loss gradient: shape mismatch");
        match self {
            Loss::CrossEntropy if y.len() == 1 => {
                let p = clamp_prob(y_hat[0]);
                Vector(vec![(p - y[0]) / (p * (1.0 - p))])
            }
            Loss::CrossEntropy => Vector(
                y.iter().zip(y_hat).map(|(t, &p)| if *t == 0.0 { 0.0 } else { -t / clamp_prob(p) }).collect(),
            ),
            Loss::Mse => {
                let n = y.len() as f64;
                Vector(y_hat.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / n).collect())
            }
        }
    }

    /// `dE/dz` for an output layer `y_hat = act(z)`. Softmax or sigmoid paired
    /// with cross entropy collapses to `y_hat - y`.
    pub fn output_delta(self, act: Activation, z: &[f64], y_hat: &[f64], y: &[f64]) -> Vector {
        match (self, act) {
            (Loss::CrossEntropy, Activation::Softmax) if y.len() > 1 => {
                Vector(y_hat.iter().zip(y).map(|(p, t)| p - t).collect())
            }
            (Loss::CrossEntropy, Activation::Sigmoid) if y.len() == 1 => Vector(vec![y_hat[0] - y[0]]),
            _ => act.backprop(z, y_hat, &self.gradient(y_hat, y)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Loss::CrossEntropy => "cross_entropy",
            Loss::Mse => "mse",
        }
    }
}
