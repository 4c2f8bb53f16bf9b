//! Dense row-major matrices and deterministic random sampling.
//!
//! Dot products accumulate in 64-bit and round once to the element type, so
//! results do not depend on summation order tricks and oracle comparisons
//! stay tight. Transposition and slicing are explicit copies, never view
//! flags. The generator is a seeded ChaCha8 stream; the same seed yields the
//! same samples on every platform.

use num_traits::Float;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Element type for dense matrices. `f32` is the working precision of the
/// engine; `f64` backs the gradient-check mode.
pub trait Scalar: Float + std::fmt::Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix with positive dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// The engine's working-precision matrix.
pub type Matrix = Mat<f32>;

impl<T: Scalar> Mat<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions { rows, cols });
        }
        let expected = rows * cols;
        if data.len() != expected {
            return Err(Error::DataLength {
                rows,
                cols,
                expected,
                got: data.len(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions { rows, cols });
        }
        Self::from_vec(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions { rows, cols });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// I.i.d. normal samples, deterministic given the generator state.
    /// Consumes exactly two raw draws per element (Box-Muller, cosine branch).
    pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, mean: f64, stddev: f64) -> Result<Self> {
        if stddev < 0.0 {
            return Err(Error::InvalidArgument {
                context: format!("gaussian stddev must be >= 0, got {stddev}"),
            });
        }
        Self::from_fn(rows, cols, |_, _| T::from_f64(rng.normal(mean, stddev)))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Standard matrix product; entries accumulate in f64 and round once.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = vec![T::zero(); self.rows * other.cols];
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            for j in 0..other.cols {
                let mut acc = 0.0f64;
                for (k, &a) in lhs_row.iter().enumerate() {
                    acc += a.to_f64() * other.data[k * other.cols + j].to_f64();
                }
                out[i * other.cols + j] = T::from_f64(acc);
            }
        }
        Mat::from_vec(self.rows, other.cols, out)
    }

    /// Explicit-copy transpose.
    pub fn transpose(&self) -> Self {
        let mut data = vec![T::zero(); self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Mat {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Mat::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the leading `n` rows.
    pub fn lead_rows(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.rows {
            return Err(Error::InvalidArgument {
                context: format!("lead_rows: n={n} outside [1, {}]", self.rows),
            });
        }
        Mat::from_vec(n, self.cols, self.data[..n * self.cols].to_vec())
    }

    /// Copy of the leading `n` columns.
    pub fn lead_cols(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.cols {
            return Err(Error::InvalidArgument {
                context: format!("lead_cols: n={n} outside [1, {}]", self.cols),
            });
        }
        let mut data = Vec::with_capacity(self.rows * n);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[..n]);
        }
        Mat::from_vec(self.rows, n, data)
    }

    /// Copy of the columns selected by `idx` (in order, repeats allowed).
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptyInput {
                context: "select_cols index list",
            });
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= self.cols) {
            return Err(Error::InvalidArgument {
                context: format!("select_cols: column {bad} out of range for {} cols", self.cols),
            });
        }
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        Mat::from_vec(self.rows, idx.len(), data)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn convert<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// SplitMix64 step; used to derive independent stream seeds from one master
/// seed without overlapping adjacent-integer seeds.
pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random source: a seeded ChaCha8 stream.
///
/// Uniform doubles take the top 53 bits of one draw; normals are Box-Muller
/// (cosine branch, two draws each). Bounded integers use rejection sampling,
/// so there is no modulo bias. Single-owner: never shared across threads.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` derived from a master seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::new(splitmix64(seed ^ splitmix64(stream)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1), 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in (0, 1]; safe under a logarithm.
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, bound); rejection sampling, bound >= 1.
    pub fn range_u64(&mut self, bound: u64) -> u64 {
        debug_assert!(bound >= 1);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % bound;
            }
        }
    }

    /// One N(mean, stddev^2) sample via Box-Muller, cosine branch.
    pub fn normal(&mut self, mean: f64, stddev: f64) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        mean + stddev * radius * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul_f64(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0f64; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f64;
                for k in 0..a.cols() {
                    acc += f64::from(a.at(i, k)) * f64::from(b.at(k, j));
                }
                out[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::identity(2).unwrap();
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.at(0, 0), 11.0);
    }

    #[test]
    fn matmul_matches_naive_reference() {
        let mut rng = Rng::new(7);
        let a = Matrix::gaussian(&mut rng, 5, 7, 0.0, 1.0).unwrap();
        let b = Matrix::gaussian(&mut rng, 7, 3, 0.0, 1.0).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul_f64(&a, &b);
        for (i, &w) in want.iter().enumerate() {
            let g = f64::from(got.data()[i]);
            let rel = (g - w).abs() / w.abs().max(1e-12);
            assert!(rel <= 1e-6, "entry {i}: got {g}, want {w}, rel {rel}");
        }
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = Matrix::zeros(2, 3).unwrap();
        let b = Matrix::zeros(2, 3).unwrap();
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("2x3"));
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let a = Matrix::gaussian(&mut rng, 8, 8, 0.0, 1.0).unwrap();
            let b = Matrix::gaussian(&mut rng, 8, 8, 0.0, 1.0).unwrap();
            let c = Matrix::gaussian(&mut rng, 8, 8, 0.0, 1.0).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().max_abs() as f64;
            let bound = 1e-4 * a.frob_norm() * b.frob_norm() * c.frob_norm();
            assert!(diff <= bound, "associativity gap {diff} > {bound}");
        }
    }

    #[test]
    fn gaussian_zero_stddev_is_constant() {
        let mut rng = Rng::new(1);
        let m = Matrix::gaussian(&mut rng, 3, 4, 2.5, 0.0).unwrap();
        assert!(m.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn gaussian_negative_stddev_rejected() {
        let mut rng = Rng::new(1);
        assert!(Matrix::gaussian(&mut rng, 2, 2, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_same_seed_bitwise_identical() {
        let a = Matrix::gaussian(&mut Rng::new(42), 16, 16, 0.0, 1.0).unwrap();
        let b = Matrix::gaussian(&mut Rng::new(42), 16, 16, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_sample_statistics() {
        let mut rng = Rng::new(1234);
        let n = 100_000usize;
        let m = Mat::<f64>::gaussian(&mut rng, 1000, 100, 0.0, 1.0).unwrap();
        let mean = m.data().iter().sum::<f64>() / n as f64;
        let var = m.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!(mean.abs() <= 0.02, "sample mean {mean}");
        assert!((std - 1.0).abs() <= 0.02, "sample std {std}");
    }

    #[test]
    fn derive_streams_differ() {
        let mut a = Rng::derive(42, 1);
        let mut b = Rng::derive(42, 2);
        let mut c = Rng::derive(43, 1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn range_u64_covers_support() {
        let mut rng = Rng::new(5);
        let mut seen = [false; 8];
        for _ in 0..1000 {
            let v = rng.range_u64(8);
            assert!(v < 8);
            seen[v as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn from_vec_validates_shape() {
        assert!(Matrix::from_vec(0, 3, vec![]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn lead_slices_copy_leading_parts() {
        let m = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32).unwrap();
        let top = m.lead_rows(2).unwrap();
        assert_eq!(top.data(), &m.data()[..8]);
        let left = m.lead_cols(2).unwrap();
        assert_eq!(left.shape(), (3, 2));
        assert_eq!(left.data(), &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0]);
        assert!(m.lead_rows(4).is_err());
        assert!(m.lead_cols(0).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::new(9);
        let m = Matrix::gaussian(&mut rng, 4, 7, 0.0, 1.0).unwrap();
        assert_eq!(m.transpose().transpose(), m);
    }
}
