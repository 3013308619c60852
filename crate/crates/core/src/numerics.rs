//! Small dense-vector kernels shared by retrieval, the mapper and the scorer.
//!
//! Everything is `f64`. Ties are always resolved towards the lower index so
//! that retrieval and ranking are reproducible bit-for-bit.
//!
//! Randomness comes from [`SeededRng`], a thin wrapper over ChaCha8
//! (`rand_chacha::ChaCha8Rng`, the 8-round ChaCha stream cipher used as a
//! counter-based generator). Gaussian draws use `rand_distr::StandardNormal`
//! (ziggurat). Both are pinned through `Cargo.lock`, so identical seeds give
//! identical streams on every platform.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty input")]
    Empty,
    #[error("k = {k} is out of range for {n} candidates")]
    KOutOfRange { k: usize, n: usize },
    #[error("non-finite value")]
    NonFinite,
}

/// Four interleaved partial sums, combined as `(s0 + s1) + (s2 + s3)`, then
/// the tail.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            s[i] += x[i] * y[i];
        }
    }
    let mut total = (s[0] + s[1]) + (s[2] + s[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        total += x * y;
    }
    total
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Cosine similarity `a·b / (|a| |b|)`.
///
/// Zero-norm inputs are rejected instead of being mapped to 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    // na * nb is commutative in IEEE arithmetic, so cosine(a, b) == cosine(b, a).
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Orders `(index, score)` pairs by descending score, lower index first on ties.
pub fn by_score_desc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices and cosines of the `k` keys closest to `query`, most similar first.
pub fn top_k_scored<K: AsRef<[f64]>>(
    query: &[f64],
    keys: &[K],
    k: usize,
) -> Result<Vec<(usize, f64)>, NumericsError> {
    if keys.is_empty() {
        return Err(NumericsError::Empty);
    }
    if k == 0 || k > keys.len() {
        return Err(NumericsError::KOutOfRange { k, n: keys.len() });
    }
    let mut scored = keys
        .iter()
        .enumerate()
        .map(|(i, key)| cosine(query, key.as_ref()).map(|c| (i, c)))
        .collect::<Result<Vec<_>, _>>()?;
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_desc);
        scored.truncate(k);
    }
    scored.sort_by(by_score_desc);
    Ok(scored)
}

pub fn top_k_indices<K: AsRef<[f64]>>(
    query: &[f64],
    keys: &[K],
    k: usize,
) -> Result<Vec<usize>, NumericsError> {
    Ok(top_k_scored(query, keys, k)?
        .into_iter()
        .map(|(i, _)| i)
        .collect())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::Empty);
    }
    if !all_finite(logits) {
        return Err(NumericsError::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|row| dot(row, x)).collect()
    }

    /// Accumulates `selfᵀ · y` into `out` (length `cols`).
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        for (row, &w) in self.iter_rows().zip(y) {
            if w != 0.0 {
                axpy(w, row, out);
            }
        }
    }

    /// Accumulates the outer product `y xᵀ` into `self`.
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &w) in y.iter().enumerate() {
            if w != 0.0 {
                axpy(w, x, self.row_mut(r));
            }
        }
    }

    /// Stacks matrices with equal column counts.
    pub fn vstack<'a>(blocks: impl IntoIterator<Item = &'a Matrix>, cols: usize) -> Matrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Matrix { rows, cols, data }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Deterministic single-owner random source.
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

    /// Independent child stream, keyed by `(seed, stream)`.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(mix64(
            self.seed ^ mix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)),
        ))
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.gaussian()).collect();
            let n = norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

/// SplitMix64 finalizer; used for stable hashing of ids.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// I.i.d. `N(0, scale²)` entries. `scale == 0` yields the zero matrix.
pub fn random_gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "matrix must be non-empty");
    assert!(
        scale >= 0.0 && scale.is_finite(),
        "scale must be finite and non-negative"
    );
    let data = (0..rows * cols).map(|_| scale * rng.gaussian()).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(NumericsError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(
            cosine(&[0.0, 0.0], &[1.0, 2.0]),
            Err(NumericsError::ZeroNorm)
        );
    }

    #[test]
    fn top_k_examples() {
        let keys = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert_eq!(top_k_indices(&[1.0, 0.0], &keys, 2).unwrap(), vec![0, 1]);
        let same = vec![vec![0.3, 0.4]; 4];
        assert_eq!(top_k_indices(&[1.0, 2.0], &same, 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            top_k_indices(&[1.0, 0.0], &keys, 4),
            Err(NumericsError::KOutOfRange { .. })
        ));
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(top_k_indices(&[1.0], &empty, 1), Err(NumericsError::Empty));
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = SeededRng::new(7);
        let keys: Vec<Vec<f64>> = (0..100).map(|_| rng.unit_vector(16)).collect();
        let q = rng.unit_vector(16);
        let mut all: Vec<(usize, f64)> = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (i, dot(&q, k) / (norm(&q) * norm(k))))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expected: Vec<usize> = all.iter().take(5).map(|p| p.0).collect();
        assert_eq!(top_k_indices(&q, &keys, 5).unwrap(), expected);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        // 40-digit reference values of exp(k) / sum(exp), frozen from mpmath.
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
        assert_eq!(softmax(&[]), Err(NumericsError::Empty));
    }

    #[test]
    fn softmax_large_input_sums_to_one() {
        let mut rng = SeededRng::new(3);
        let logits: Vec<f64> = (0..1_000_000).map(|_| 50.0 * rng.gaussian()).collect();
        let p = softmax(&logits).unwrap();
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_matrix_properties() {
        let a = random_gaussian_matrix(4, 5, 1.0, &mut SeededRng::new(11));
        let b = random_gaussian_matrix(4, 5, 1.0, &mut SeededRng::new(11));
        assert_eq!(a, b);
        let z = random_gaussian_matrix(2, 2, 0.0, &mut SeededRng::new(1));
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let m = random_gaussian_matrix(100, 100, 1.0, &mut SeededRng::new(5));
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        assert!((0.97..=1.03).contains(&sd), "sample std {sd}");
    }

    #[test]
    fn forked_streams_differ_but_repeat() {
        let root = SeededRng::new(42);
        let mut a = root.fork(1);
        let mut b = root.fork(2);
        let mut a2 = root.fork(1);
        let xa: Vec<f64> = (0..4).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.uniform()).collect();
        let xa2: Vec<f64> = (0..4).map(|_| a2.uniform()).collect();
        assert_eq!(xa, xa2);
        assert_ne!(xa, xb);
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, d).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in vec_strategy(6), b in vec_strategy(6)) {
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }

        #[test]
        fn cosine_is_scale_invariant(a in vec_strategy(6), b in vec_strategy(6), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
            prop_assert!((cosine(&scaled, &b).unwrap() - cosine(&a, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn full_top_k_is_sorted_permutation(keys in prop::collection::vec(vec_strategy(3), 1..20), q in vec_strategy(3)) {
            let order = top_k_indices(&q, &keys, keys.len()).unwrap();
            let mut seen = order.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..keys.len()).collect::<Vec<_>>());
            for w in order.windows(2) {
                let a = cosine(&q, &keys[w[0]]).unwrap();
                let b = cosine(&q, &keys[w[1]]).unwrap();
                prop_assert!(a > b || (a == b && w[0] < w[1]));
            }
        }

        #[test]
        fn softmax_normalizes(logits in prop::collection::vec(-1e3f64..1e3, 1..200)) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }
}
