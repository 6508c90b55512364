//! Dense symmetric linear algebra, stable reductions, and randomness.
//!
//! Everything here is 64-bit and deterministic. Matrices are small (ensemble
//! sizes and minibatch widths), so the routines are plain row-major loops
//! with no blocking.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    /// Symmetric factorization failed even after the jitter ladder.
    #[error("matrix is not positive definite (jitter up to {max_jitter:e} tried)")]
    NotPositiveDefinite { max_jitter: f64 },
    /// A function handed to a finite-difference routine returned NaN or ±inf.
    #[error("function evaluation returned a non-finite value")]
    NonFiniteEvaluation,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, entries: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            entries.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, entries }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.cols + j] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Max relative asymmetry |a_ij − a_ji| / max(1, |a_ij|).
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = (self.get(i, j) - self.get(j, i)).abs();
                let scale = self.get(i, j).abs().max(1.0);
                worst = worst.max(d / scale);
            }
        }
        worst
    }

    /// Lower-triangular Cholesky factor of `self + jitter·I`.
    fn cholesky_with(&self, jitter: f64) -> Option<Matrix> {
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j) + if i == j { jitter } else { 0.0 };
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l.set(i, j, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Some(l)
    }

    /// Solve `self · x = b` for symmetric positive-definite `self`.
    pub fn solve_spd(&self, b: &[f64], jitter: f64) -> Result<Vec<f64>, NumericsError> {
        let l = self
            .cholesky_ladder(jitter)
            .map(|(l, _)| l)
            .ok_or(NumericsError::NotPositiveDefinite { max_jitter: jitter * 100.0 })?;
        let n = self.rows;
        // forward then back substitution
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l.get(k, i) * x[k];
            }
            x[i] = s / l.get(i, i);
        }
        Ok(x)
    }

    /// Inverse of a symmetric positive-definite matrix.
    pub fn inverse_spd(&self, jitter: f64) -> Result<Matrix, NumericsError> {
        let n = self.rows;
        let mut inv = Matrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.solve_spd(&e, jitter)?;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        Ok(inv)
    }

    fn cholesky_ladder(&self, jitter: f64) -> Option<(Matrix, f64)> {
        // Gram matrices of near-duplicate particles are numerically singular;
        // retry with 10x and 100x the requested jitter before giving up.
        for &j in &[jitter, jitter * 10.0, jitter * 100.0] {
            if let Some(l) = self.cholesky_with(j) {
                return Some((l, j));
            }
        }
        None
    }
}

/// `ln det(m + jitter·I)` via Cholesky, for symmetric positive-definite `m`.
///
/// The jitter ladder retries with 10x and 100x before failing.
pub fn logdet_psd(m: &Matrix, jitter: f64) -> Result<f64, NumericsError> {
    let (value, _) = logdet_psd_with_jitter(m, jitter)?;
    Ok(value)
}

/// Same as [`logdet_psd`] but also reports the jitter that was used.
pub fn logdet_psd_with_jitter(m: &Matrix, jitter: f64) -> Result<(f64, f64), NumericsError> {
    assert!(m.is_square(), "logdet of a non-square matrix");
    debug_assert!(m.asymmetry() < 1e-10, "logdet of an asymmetric matrix");
    let (l, used) = m
        .cholesky_ladder(jitter)
        .ok_or(NumericsError::NotPositiveDefinite { max_jitter: jitter * 100.0 })?;
    let mut acc = 0.0;
    for i in 0..l.rows() {
        acc += l.get(i, i).ln();
    }
    Ok((2.0 * acc, used))
}

/// `ln Σ exp(v_i)` with max-shift stabilization.
pub fn logsumexp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "logsumexp of an empty slice");
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(m.is_finite(), "logsumexp over non-finite entries");
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Middle order statistic; mean of the two middle values for even lengths.
pub fn median(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "median of an empty slice");
    let mut buf = v.to_vec();
    let n = buf.len();
    let mid = n / 2;
    let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let hi = *m;
    if n % 2 == 1 {
        hi
    } else {
        let lo = buf[..mid]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Central-difference gradient `(f(x+he_i) − f(x−he_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, at: &[f64], step: f64) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite differences need a positive step");
    let mut x = at.to_vec();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFiniteEvaluation);
        }
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Squared Euclidean distance between two slices of equal length.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seedable counter-based generator (SplitMix64 core).
///
/// Identical seeds produce bitwise-identical streams. Instances are
/// single-owner; [`Rng::split`] derives an independent sub-stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Derive an independent generator keyed off the next draw.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64() ^ 0xA5A5_A5A5_5A5A_5A5A)
    }

    /// Fisher–Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    /// Jacobi eigenvalue iteration; independent oracle for the Cholesky path.
    fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        for _ in 0..100 {
            let mut p = 0;
            let mut q = 1;
            let mut off = 0.0f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    if a.get(i, j).abs() > off {
                        off = a.get(i, j).abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
            let apq = a.get(p, q);
            let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut b = a.clone();
            for k in 0..n {
                b.set(p, k, c * a.get(p, k) - s * a.get(q, k));
                b.set(q, k, s * a.get(p, k) + c * a.get(q, k));
            }
            let b2 = b.clone();
            for k in 0..n {
                b.set(k, p, c * b2.get(k, p) - s * b2.get(k, q));
                b.set(k, q, s * b2.get(k, p) + c * b2.get(k, q));
            }
            a = b;
        }
        (0..n).map(|i| a.get(i, i)).collect()
    }

    fn random_psd(n: usize, rng: &mut Rng) -> Matrix {
        // B Bᵀ + small diagonal
        let b = Matrix::from_fn(n, n, |_, _| rng.normal());
        Matrix::from_fn(n, n, |i, j| {
            let mut s = 0.0;
            for k in 0..n {
                s += b.get(i, k) * b.get(j, k);
            }
            s + if i == j { 0.5 } else { 0.0 }
        })
    }

    #[test]
    fn logdet_identity_is_zero() {
        let m = Matrix::identity(3);
        assert_eq!(logdet_psd(&m, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn logdet_diagonal() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 8.0]]);
        let v = logdet_psd(&m, 0.0).unwrap();
        assert!((v - 16.0f64.ln()).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn logdet_matches_eigen_oracle() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let m = random_psd(5, &mut rng);
            let eigs = jacobi_eigenvalues(&m);
            let oracle: f64 = eigs.iter().map(|e| e.ln()).sum();
            let v = logdet_psd(&m, 0.0).unwrap();
            assert!((v - oracle).abs() < 1e-9, "{v} vs {oracle}");
        }
    }

    #[test]
    fn logdet_rejects_indefinite() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(
            logdet_psd(&m, 1e-12),
            Err(NumericsError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn logdet_jitter_ladder_rescues_singular() {
        // all-ones 2x2 is singular; the ladder should still factor it
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let v = logdet_psd(&m, 1e-10).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn logdet_is_additive_for_commuting_diagonals() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 7.0]]);
        let ab = Matrix::from_fn(2, 2, |i, j| if i == j { a.get(i, i) * b.get(i, i) } else { 0.0 });
        let lhs = logdet_psd(&a, 0.0).unwrap() + logdet_psd(&b, 0.0).unwrap();
        let rhs = logdet_psd(&ab, 0.0).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp(&[0.0, 0.0]) - 2.0f64.ln()).abs() < 1e-15);
        let v = logsumexp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive_for_moderate_magnitudes() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let v: Vec<f64> = (0..10).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!((logsumexp(&v) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn median_small_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = Rng::new(11);
        let v: Vec<f64> = (0..101).map(|_| rng.next_f64()).collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(median(&v), sorted[50]);
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.0, &[1.0, 2.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_flags_non_finite() {
        let r = finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-5);
        assert!(matches!(r, Err(NumericsError::NonFiniteEvaluation)));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn spd_solve_roundtrip() {
        let mut rng = Rng::new(5);
        let m = random_psd(4, &mut rng);
        let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let x = m.solve_spd(&b, 0.0).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..4 {
                s += m.get(i, j) * x[j];
            }
            assert!((s - b[i]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(
            v in proptest::collection::vec(-20.0f64..20.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted) - c;
            prop_assert!((lhs - logsumexp(&v)).abs() < 1e-12);
        }

        #[test]
        fn median_is_an_order_statistic(
            v in proptest::collection::vec(-1e6f64..1e6, 1..40),
        ) {
            let m = median(&v);
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = if sorted.len() % 2 == 1 {
                sorted[sorted.len() / 2]
            } else {
                0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
            };
            prop_assert_eq!(m, oracle);
        }
    }
}
