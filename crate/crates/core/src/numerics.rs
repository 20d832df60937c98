//! Small dense linear algebra over `f64`, the activation functions the
//! encoder and classifier need, a seeded portable RNG and a central
//! finite-difference gradient checker.

use std::ops::{Deref, DerefMut};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    /// Builds a vector, rejecting non-finite entries.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i} is {}", data[i])));
        }
        Ok(Vector(data))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> Vector {
        Vector(self.iter().map(|x| x * scale).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Mat::from_vec(rows.len(), cols, rows.concat())
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "matvec: matrix has {} columns, vector has {} entries",
                self.cols,
                v.len()
            )));
        }
        Ok(self.matvec_unchecked(v))
    }

    pub(crate) fn matvec_unchecked(&self, v: &[f64]) -> Vector {
        Vector(
            self.data
                .chunks_exact(self.cols.max(1))
                .take(self.rows)
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// `selfᵀ · v`
    pub(crate) fn matvec_transposed(&self, v: &[f64]) -> Vector {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.data.chunks_exact(self.cols.max(1)).zip(v) {
            if s == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += s * a;
            }
        }
        Vector(out)
    }

    /// `self += scale · a ⊗ b`
    pub(crate) fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &x) in self.data.chunks_exact_mut(self.cols.max(1)).zip(a) {
            let s = scale * x;
            if s == 0.0 {
                continue;
            }
            for (m, y) in row.iter_mut().zip(b) {
                *m += s * y;
            }
        }
    }

    /// `self += scale · other`
    pub fn axpy(&mut self, scale: f64, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Free-function form of [`Mat::matvec`].
pub fn matvec(m: &Mat, v: &[f64]) -> Result<Vector> {
    m.matvec(v)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of tanh given its output `y = tanh(x)`.
pub fn tanh_grad_from_output(y: f64) -> f64 {
    1.0 - y * y
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / total).collect())
}

/// Backward through softmax: given `a = softmax(z)` and `dL/da`, returns `dL/dz`.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vector {
    let inner: f64 = probs.iter().zip(upstream).map(|(p, g)| p * g).sum();
    Vector(
        probs
            .iter()
            .zip(upstream)
            .map(|(p, g)| p * (g - inner))
            .collect(),
    )
}

/// Seeded ChaCha8 stream. Floats are built from the top 53 bits of each
/// 64-bit draw so the sequence is identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Derives an independent child stream; used to give each subsystem its
    /// own generator from one user-facing seed.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// Compares an analytic gradient with central finite differences and returns
/// the worst per-coordinate relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::Dimension(format!(
            "grad_check: {} parameters, {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("grad_check step must be positive, got {step}")));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function evaluation at coordinate {i} is not finite"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_examples() {
        let id = Mat::identity(2);
        assert_eq!(id.matvec(&[3.0, 4.0]).unwrap().as_ref(), &[3.0, 4.0]);
        let z = Mat::zeros(2, 2);
        assert_eq!(z.matvec(&[5.0, -1.0]).unwrap().as_ref(), &[0.0, 0.0]);
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &[1.0, 1.0]).unwrap().as_ref(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let m = Mat::zeros(2, 3);
        assert!(matches!(m.matvec(&[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_and_outer_agree_with_explicit_loops() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec_transposed(&[1.0, -1.0]).as_ref(), &[-3.0, -3.0, -3.0]);
        let mut acc = Mat::zeros(2, 3);
        acc.add_outer(2.0, &[1.0, 0.5], &[1.0, 2.0, 3.0]);
        assert_eq!(acc.data(), &[2.0, 4.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_finite_construction_rejected() {
        assert!(Vector::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(Mat::from_vec(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Mat::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        for p in s.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.is_finite());
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(s[1] < 1e-300);
        assert_eq!(softmax(&[42.0]).as_ref(), &[1.0]);
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        for x in [-3.0, -0.1, 0.7, 12.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_examples() {
        let err = grad_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
        let t = 0.5f64.tanh();
        let err = grad_check(|x| x[0].tanh(), &[0.5], &[1.0 - t * t], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
        // 2x the true gradient: |2g - g| / (2g + g) = 1/3
        let err = grad_check(|x| x[0] * x[0], &[3.0], &[12.0], 1e-5).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let r = grad_check(|x| (x[0]).ln(), &[0.0], &[1.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = [0.3, -1.2, 0.8];
        let g = [1.0, 2.0, -0.5];
        let analytic = softmax_backward(&softmax(&z), &g);
        let err = grad_check(|z| softmax(z).dot(&g), &z, &analytic, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rng_is_reproducible_and_bounded() {
        let mut a = Rng::new(11);
        let mut b = Rng::new(11);
        for _ in 0..10_000 {
            let x = a.uniform();
            assert_eq!(x.to_bits(), b.uniform().to_bits());
            assert!((0.0..1.0).contains(&x));
        }
        let mut c = Rng::new(12);
        assert_ne!(Rng::new(11).next_u64(), c.next_u64());
        for _ in 0..1000 {
            assert!(a.below(7) < 7);
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(3);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
