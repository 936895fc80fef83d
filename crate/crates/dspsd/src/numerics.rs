//! Dense numeric core shared by every learning module: a small row-major
//! matrix type, elementwise nonlinearities, a seeded platform-stable RNG,
//! plain SGD updates, and a central-difference gradient checker.
//!
//! Everything runs in `f64`. Gradients elsewhere in this crate are derived by
//! hand and verified against [`check_gradient`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument for {op}: {reason}")]
    InvalidArg { op: &'static str, reason: String },
}

/// Dense matrix of `f64` with row-major storage.
///
/// A row vector is a `1 x n` tensor. Public constructors and operations keep
/// entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch {
                op: "from_vec",
                expected: format!("{} entries", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("from_vec"));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::ShapeMismatch {
                op: "from_rows",
                expected: format!("uniform row length {c}"),
                got: "ragged rows".to_string(),
            });
        }
        Tensor2::from_vec(r, c, rows.concat())
    }

    /// Row vector (`1 x n`) from a slice.
    pub fn row(values: &[f64]) -> Result<Self, NumericsError> {
        Tensor2::from_vec(1, values.len(), values.to_vec())
    }

    /// Entries drawn i.i.d. uniform from `[lo, hi)`.
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Tensor2 { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor2 {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2, NumericsError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2, NumericsError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(
        &self,
        other: &Tensor2,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2, NumericsError> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape(), other.shape()));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += factor * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor2, factor: f64) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_scaled", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Dot product of two tensors with identical shapes (sum of entrywise
    /// products); the usual inner product for row vectors.
    pub fn dot(&self, other: &Tensor2) -> Result<f64, NumericsError> {
        if self.shape() != other.shape() {
            return Err(shape_err("dot", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn shape_err(op: &'static str, expected: (usize, usize), got: (usize, usize)) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        expected: format!("{}x{}", expected.0, expected.1),
        got: format!("{}x{}", got.0, got.1),
    }
}

/// Standard matrix product.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            expected: format!("rhs with {} rows", a.cols),
            got: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Pointwise nonlinearities used across the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElemOp {
    Tanh,
    Sigmoid,
    Exp,
}

impl ElemOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ElemOp::Tanh => x.tanh(),
            ElemOp::Sigmoid => sigmoid(x),
            ElemOp::Exp => x.exp(),
        }
    }

    /// Derivative expressed through the activation output `y = op(x)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            ElemOp::Tanh => 1.0 - y * y,
            ElemOp::Sigmoid => y * (1.0 - y),
            ElemOp::Exp => y,
        }
    }
}

/// Apply `op` to every entry of `t`.
pub fn elementwise(op: ElemOp, t: &Tensor2) -> Tensor2 {
    t.map(|v| op.apply(v))
}

/// Numerically stable logistic function, `1 / (1 + e^{-x})`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(x)`, stable for large negative `x`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// One plain SGD step, `param - lr * grad`.
pub fn sgd_step(param: &Tensor2, grad: &Tensor2, lr: f64) -> Result<Tensor2, NumericsError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NumericsError::InvalidArg {
            op: "sgd_step",
            reason: format!("learning rate must be positive and finite, got {lr}"),
        });
    }
    if param.shape() != grad.shape() {
        return Err(shape_err("sgd_step", param.shape(), grad.shape()));
    }
    let mut out = param.clone();
    out.add_scaled(grad, -lr)?;
    Ok(out)
}

/// In-place SGD step used by the training loops.
pub fn sgd_step_in_place(
    param: &mut Tensor2,
    grad: &Tensor2,
    lr: f64,
) -> Result<(), NumericsError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NumericsError::InvalidArg {
            op: "sgd_step",
            reason: format!("learning rate must be positive and finite, got {lr}"),
        });
    }
    param.add_scaled(grad, -lr)
}

/// Compare an analytic gradient against central differences.
///
/// For every coordinate the numeric gradient is
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`; the returned value is
/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn check_gradient(
    mut f: impl FnMut(&Tensor2) -> f64,
    x: &Tensor2,
    analytic_grad: &Tensor2,
    eps: f64,
) -> Result<f64, NumericsError> {
    if x.shape() != analytic_grad.shape() {
        return Err(shape_err("check_gradient", x.shape(), analytic_grad.shape()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(NumericsError::InvalidArg {
            op: "check_gradient",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for idx in 0..x.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let up = f(&probe);
        probe.data[idx] = orig - eps;
        let down = f(&probe);
        probe.data[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite("check_gradient"));
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic_grad.data[idx] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Seeded, platform-stable pseudo-random generator.
///
/// The u64 stream is ChaCha8 (via `rand_chacha`), seeded through the
/// fixed SplitMix64 expansion of `seed_from_u64`. Floating-point draws map
/// the top 53 bits of each u64 onto `[0, 1)`; bounded integers use the
/// multiply-shift reduction. Identical seeds therefore reproduce identical
/// draw sequences on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: rand_chacha::ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        use rand_core::SeedableRng;
        Rng {
            seed,
            inner: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seed for a named substream, so components can draw independently.
    /// SplitMix64-style mixing of `(seed, tag)`.
    pub fn derive_seed(seed: u64, tag: u64) -> u64 {
        let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Independent generator for a named substream.
    pub fn substream(&self, tag: u64) -> Rng {
        Rng::new(Rng::derive_seed(self.seed, tag))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        use rand_core::RngCore;
        self.inner.next_u64()
    }

    /// Uniform draw from `[0, 1)` using the top 53 bits.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform01() * (hi - lo)
    }

    /// Uniform integer in `[0, n)` by multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
