//! Dense numeric kernels shared by the model, training and inference code.
//!
//! Everything is `f64`. Matrices are row-major.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound applied to sigmoid pre-activations.
pub const DEFAULT_SIGMOID_CLIP: f64 = 30.0;

/// Tolerance used when validating that a vector is a probability distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random_uniform(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Self { rows, cols, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out += M[:, j]`, the product of `M` with a one-hot vector.
    pub fn add_column_to(&self, j: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o += self.data[i * self.cols + j];
        }
    }

    /// `out += M x` without shape checks beyond debug assertions.
    pub fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(i), x);
        }
    }

    /// `out += Mᵀ y`.
    pub fn gemv_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += yi * m;
            }
        }
    }

    /// `M += a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (m, &bj) in self.data[i * cols..(i + 1) * cols].iter_mut().zip(b) {
                *m += ai * bj;
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("vector entries must be finite".into()));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = M x + b`.
pub fn affine(m: &DenseMatrix, x: &DenseVector, b: &DenseVector) -> Result<DenseVector> {
    if m.cols() != x.dim() || m.rows() != b.dim() {
        return Err(Error::Shape(format!(
            "affine: matrix {}x{}, input {}, bias {}",
            m.rows(),
            m.cols(),
            x.dim(),
            b.dim()
        )));
    }
    let mut out = b.as_slice().to_vec();
    m.gemv_acc(x, &mut out);
    Ok(DenseVector(out))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn sigmoid_clip_scalar(z: f64, clip: f64) -> f64 {
    sigmoid(z.clamp(-clip, clip))
}

/// ln(1 + e^z) without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid_clipped(z: &DenseVector, clip: f64) -> DenseVector {
    DenseVector(z.iter().map(|&x| sigmoid_clip_scalar(x, clip)).collect())
}

pub fn sigmoid_clipped_in_place(z: &mut [f64], clip: f64) {
    for x in z.iter_mut() {
        *x = sigmoid_clip_scalar(*x, clip);
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &DenseVector) -> DenseVector {
    DenseVector(softmax_slice(z))
}

pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// `ln Σ exp(z_i)`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Draws index `i` with probability `p[i]`.
pub fn multinomial_sample(p: &DenseVector, rng: &mut SeededRng) -> Result<usize> {
    validate_distribution(p)?;
    Ok(sample_unchecked(p, rng))
}

pub(crate) fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidInput("empty distribution".into()));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidInput(
            "distribution entries must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "distribution sums to {total}, expected 1"
        )));
    }
    Ok(())
}

pub(crate) fn sample_unchecked(p: &[f64], rng: &mut SeededRng) -> usize {
    let target = rng.next_f64() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        acc += pi;
        last_positive = i;
        if target < acc {
            return i;
        }
    }
    last_positive
}

/// Project-wide PRNG: ChaCha8 seeded from a 64-bit integer.
///
/// ChaCha8's output stream is fixed by its definition, so a seed reproduces
/// the same numbers across platforms and releases.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream keyed by `(self.seed, stream)`; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Self {
        Self::new(derive_seed(self.seed, stream))
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// SplitMix64 finalizer; used for seed derivation and feature hashing.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(0x5EED)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_zero() {
        let y = affine(&DenseMatrix::identity(2), &v(&[3.0, -1.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(y.as_slice(), &[3.0, -1.0]);
        let y = affine(&DenseMatrix::zeros(2, 2), &v(&[7.0, 9.0]), &v(&[5.0, 5.0])).unwrap();
        assert_eq!(y.as_slice(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_hand_computed() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = affine(&m, &v(&[1.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(affine(&m, &v(&[1.0, 1.0]), &v(&[0.0, 0.0])).is_err());
        assert!(affine(&m, &v(&[1.0, 1.0, 1.0]), &v(&[0.0])).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_clipped(&v(&[0.0]), 50.0).as_slice(), &[0.5]);
        let a = sigmoid_clipped(&v(&[-3.7]), 50.0)[0];
        let b = sigmoid_clipped(&v(&[3.7]), 50.0)[0];
        assert_relative_eq!(a + b, 1.0, epsilon = 1e-15);
        let big = sigmoid_clipped(&v(&[1000.0]), 50.0)[0];
        assert_eq!(big, 1.0 / (1.0 + (-50.0f64).exp()));
        let small = sigmoid_clipped(&v(&[-1000.0]), 50.0)[0];
        assert!(small > 0.0);
        // at 50 the upper side rounds to exactly 1.0 in f64; the default does not
        let top = sigmoid_clipped(&v(&[1e9]), DEFAULT_SIGMOID_CLIP)[0];
        assert!(top < 1.0);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&v(&[2.5, 2.5, 2.5]));
        for &x in p.iter() {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&v(&[0.0, 2f64.ln()]));
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn multinomial_degenerate_and_deterministic() {
        let mut rng = SeededRng::new(3);
        let p = v(&[1.0, 0.0, 0.0]);
        for _ in 0..100 {
            assert_eq!(multinomial_sample(&p, &mut rng).unwrap(), 0);
        }
        let p = v(&[0.2, 0.3, 0.5]);
        let mut a = SeededRng::new(11);
        let mut b = SeededRng::new(11);
        let sa: Vec<_> = (0..50)
            .map(|_| multinomial_sample(&p, &mut a).unwrap())
            .collect();
        let sb: Vec<_> = (0..50)
            .map(|_| multinomial_sample(&p, &mut b).unwrap())
            .collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn multinomial_frequencies_pass_chi_square() {
        let p = v(&[0.25, 0.75]);
        let mut rng = SeededRng::new(2024);
        let n = 10_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            counts[multinomial_sample(&p, &mut rng).unwrap()] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(p.iter())
            .map(|(&c, &pi)| {
                let e = pi * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 99% quantile of chi-square with 1 degree of freedom
        assert!(chi2 < 6.635, "chi2 = {chi2}");
    }

    #[test]
    fn multinomial_rejects_non_distribution() {
        let mut rng = SeededRng::new(0);
        assert!(multinomial_sample(&v(&[0.5, 0.6]), &mut rng).is_err());
        assert!(multinomial_sample(&v(&[-0.5, 1.5]), &mut rng).is_err());
        assert!(multinomial_sample(&v(&[]), &mut rng).is_err());
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        for _ in 0..20 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(
            SeededRng::new(1).derive(0).next_u64(),
            SeededRng::new(1).derive(1).next_u64()
        );
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            z in prop::collection::vec(-1e3f64..1e3, 1..40),
            k in -1e3f64..1e3,
        ) {
            let p = softmax(&v(&z));
            prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = z.iter().map(|x| x + k).collect();
            let q = softmax(&v(&shifted));
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn sigmoid_monotone_bounded(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s = sigmoid_clipped(&v(&[lo, hi]), DEFAULT_SIGMOID_CLIP);
            prop_assert!(s[0] <= s[1]);
            prop_assert!(s[0] > 0.0 && s[1] < 1.0);
        }

        #[test]
        fn affine_is_linear(
            seed in any::<u64>(),
            alpha in -10f64..10.0,
            beta in -10f64..10.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let m = DenseMatrix::random_uniform(4, 5, 1.0, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let zero = DenseVector::zeros(4);
            let comb: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = affine(&m, &v(&comb), &zero).unwrap();
            let fx = affine(&m, &v(&x), &zero).unwrap();
            let fy = affine(&m, &v(&y), &zero).unwrap();
            for i in 0..4 {
                let rhs = alpha * fx[i] + beta * fy[i];
                let scale = lhs[i].abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs[i] - rhs).abs() / scale <= 1e-9);
            }
        }
    }
}
