//! Bandwidths, repulsion terms, Gram matrices, and the inequality chains
//! that tighten the standard Jensen bound between the mean log-likelihood
//! and the model-averaged log predictive.
//!
//! Every operation acts on one column of a [`LogLikMatrix`](crate::ensemble::LogLikMatrix):
//! the N values `L_i = ln p(x | θ_i)` at a fixed datum. Dataset-level
//! reports average per-column values uniformly.

use crate::ensemble::{bma_log_predictive, LogLikMatrix};
use crate::numerics::{logdet_psd, logdet_psd_with_jitter, median, Matrix, NumericsError};
use std::io::Write;
use thiserror::Error;

/// Slack tolerance for the inequality-chain verdicts.
pub const CHAIN_TOLERANCE: f64 = 1e-9;

/// Margin for the Gram row-sum selection rule: row sums must fall below
/// `N − ROW_SUM_MARGIN` before the bandwidth search stops.
pub const ROW_SUM_MARGIN: f64 = 0.5;

/// Base jitter for the log-determinant diversity terms.
pub const LOGDET_JITTER: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum JensenError {
    /// All particles carry the same log-likelihood; scale selection is
    /// undefined and the repulsion is zero.
    #[error("all log-likelihoods are identical; repulsion is zero")]
    Degenerate,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which log-likelihood extremes enter the inverse-square bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthKind {
    /// Per-particle `exp(L_i + mean(L) − 2 max(L))`.
    H,
    /// Per-particle `exp(L_i + min(L) − 2 max(L))`; the certified choice.
    Hm,
    /// `min(L)` replaced by `median(L) − √M` with `M` the empirical second
    /// moment of `L`.
    HMedian,
    /// Scalar `exp(min(L) + mean(L) − 2 max(L))`; the pairwise form.
    Hw,
}

/// Inverse-square bandwidths: per-particle for `H`/`Hm`/`HMedian`, a single
/// scalar for `Hw`.
#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthInvSq {
    PerParticle(Vec<f64>),
    Scalar(f64),
}

fn mean(l: &[f64]) -> f64 {
    l.iter().sum::<f64>() / l.len() as f64
}

fn max(l: &[f64]) -> f64 {
    l.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn min(l: &[f64]) -> f64 {
    l.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Empirical second moment of `L`, the default stand-in for the median
/// bandwidth's moment constant.
pub fn median_m(l: &[f64]) -> f64 {
    l.iter().map(|v| v * v).sum::<f64>() / l.len() as f64
}

pub fn bandwidth_inv_sq(kind: BandwidthKind, l: &[f64]) -> BandwidthInvSq {
    assert!(!l.is_empty());
    let mx = max(l);
    match kind {
        BandwidthKind::H => {
            let m = mean(l);
            BandwidthInvSq::PerParticle(l.iter().map(|li| (li + m - 2.0 * mx).exp()).collect())
        }
        BandwidthKind::Hm => {
            let mn = min(l);
            BandwidthInvSq::PerParticle(l.iter().map(|li| (li + mn - 2.0 * mx).exp()).collect())
        }
        BandwidthKind::HMedian => {
            let anchor = median(l) - median_m(l).sqrt();
            BandwidthInvSq::PerParticle(
                l.iter().map(|li| (li + anchor - 2.0 * mx).exp()).collect(),
            )
        }
        BandwidthKind::Hw => BandwidthInvSq::Scalar((min(l) + mean(l) - 2.0 * mx).exp()),
    }
}

/// Scalar pairwise-form inverse-square bandwidth.
pub fn hw_inv_sq(l: &[f64]) -> f64 {
    match bandwidth_inv_sq(BandwidthKind::Hw, l) {
        BandwidthInvSq::Scalar(v) => v,
        BandwidthInvSq::PerParticle(_) => unreachable!(),
    }
}

/// Weighted variance of the log-likelihoods:
/// `(1/N) Σ_i h_i⁻² (L_i − mean L)² / 4`.
pub fn repulsion_r(kind: BandwidthKind, l: &[f64]) -> f64 {
    let m = mean(l);
    let weights = match bandwidth_inv_sq(kind, l) {
        BandwidthInvSq::PerParticle(w) => w,
        BandwidthInvSq::Scalar(s) => vec![s; l.len()],
    };
    l.iter()
        .zip(&weights)
        .map(|(li, wi)| wi * (li - m) * (li - m))
        .sum::<f64>()
        / (4.0 * l.len() as f64)
}

/// Pairwise covariance form with the scalar bandwidth:
/// `h_w⁻² Σ_{ij} (L_i − L_j)² / (8 N²)`.
pub fn repulsion_rc(l: &[f64]) -> f64 {
    let n = l.len();
    let w = hw_inv_sq(l);
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = l[i] - l[j];
            s += d * d;
        }
    }
    w * s / (8.0 * (n * n) as f64)
}

/// Both sides of the variance identity
/// `(1/N) Σ (L_i − L̄)² = (1/2N²) Σ_{ij} (L_i − L_j)²`.
pub fn covariance_identity_check(l: &[f64]) -> (f64, f64) {
    let n = l.len();
    let m = mean(l);
    let lhs = l.iter().map(|li| (li - m) * (li - m)).sum::<f64>() / n as f64;
    let mut rhs = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = l[i] - l[j];
            rhs += d * d;
        }
    }
    (lhs, rhs / (2.0 * (n * n) as f64))
}

/// Loss-space Gram matrix `G_ij = exp(−(8 h_w²)⁻¹ (L_i − L_j)²)`.
pub fn gram_g(l: &[f64]) -> Matrix {
    let w = hw_inv_sq(l);
    Matrix::from_fn(l.len(), l.len(), |i, j| {
        let d = l[i] - l[j];
        (-w * d * d / 8.0).exp()
    })
}

/// Variant of [`gram_g`] with the per-datum squared differences summed
/// inside the exponent, pooling the scalar bandwidth across columns.
pub fn gram_g_summed(llm: &LogLikMatrix) -> Matrix {
    let n = llm.particles();
    let d = llm.data();
    let w = (0..d).map(|c| hw_inv_sq(&llm.column(c))).sum::<f64>() / d as f64;
    Matrix::from_fn(n, n, |i, j| {
        let mut s = 0.0;
        for c in 0..d {
            let diff = llm.values.get(i, c) - llm.values.get(j, c);
            s += diff * diff;
        }
        (-w * s / 8.0).exp()
    })
}

/// Row-normalized log form `R_w = −(1/N) Σ_i ln(Σ_j G_ij / N)`.
pub fn repulsion_rw(l: &[f64]) -> f64 {
    let g = gram_g(l);
    let n = l.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row_avg = g.row(i).iter().sum::<f64>() / n as f64;
        acc -= row_avg.ln();
    }
    acc / n as f64
}

/// Rescaled Gram matrix `K_ij = exp(−h̃ ln N (4 h_w)⁻² (L_i − L_j)²)`.
fn gram_k(l: &[f64], tilde_h: f64) -> Matrix {
    let w = hw_inv_sq(l);
    let n = l.len() as f64;
    let coef = tilde_h * n.ln() * w / 16.0;
    Matrix::from_fn(l.len(), l.len(), |i, j| {
        let d = l[i] - l[j];
        (-coef * d * d).exp()
    })
}

fn max_row_sum(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|i| m.row(i).iter().sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Double the rescaling constant from 1 until every row sum of `K` falls
/// below `N − row_margin`. Fails as degenerate when all log-likelihoods
/// coincide (row sums are then pinned at N).
pub fn select_tilde_h(l: &[f64], row_margin: f64) -> Result<(f64, Matrix), JensenError> {
    let n = l.len() as f64;
    if l.len() < 2 || max(l) - min(l) == 0.0 {
        return Err(JensenError::Degenerate);
    }
    let mut tilde_h = 1.0;
    while tilde_h <= 2f64.powi(60) {
        let k = gram_k(l, tilde_h);
        if max_row_sum(&k) < n - row_margin {
            return Ok((tilde_h, k));
        }
        tilde_h *= 2.0;
    }
    Err(JensenError::Degenerate)
}

/// Log-determinant repulsion value with its selected constants.
#[derive(Debug, Clone, Copy)]
pub struct LogDetRepulsion {
    pub value: f64,
    pub tilde_h: f64,
    /// Diagonal shift realizing the chain; chosen per column.
    pub epsilon: f64,
    pub degenerate: bool,
}

fn logdet_shifted(k: &Matrix, eps: f64) -> Option<f64> {
    // direct factorization; callers treat failure as "effectively −∞"
    logdet_psd(k, eps).ok()
}

/// Log-determinant form of the chain's middle term:
/// `R_g = (2 / (h̃ N)) (ln N − ln det(εI + K))` with `h̃` from
/// [`select_tilde_h`].
///
/// The shift `ε` is guaranteed to exist but no fixed value works for every
/// ensemble, so it is selected per column by monotone bisection until the
/// value lands strictly inside the certified window
/// `(0, ½·min(R_c/2, jensen_gap)]`. `eps_start` seeds the search.
pub fn repulsion_rg(l: &[f64], eps_start: f64) -> LogDetRepulsion {
    let (tilde_h, k) = match select_tilde_h(l, ROW_SUM_MARGIN) {
        Ok(pair) => pair,
        Err(_) => {
            return LogDetRepulsion { value: 0.0, tilde_h: 0.0, epsilon: eps_start, degenerate: true }
        }
    };
    let n = l.len() as f64;
    let scale = 2.0 / (tilde_h * n);
    let rg_at = |eps: f64| logdet_shifted(&k, eps).map_or(f64::INFINITY, |ld| scale * (n.ln() - ld));

    let gap = jensen_gap(l);
    let r1 = repulsion_rc(l) / 2.0;
    let cap = 0.5 * r1.min(gap);
    if cap <= 0.0 {
        return LogDetRepulsion { value: 0.0, tilde_h, epsilon: eps_start, degenerate: true };
    }
    // R_g(ε) decreases continuously from a positive supremum to −∞, so a
    // shift landing in [cap/4, cap] always exists.
    let hi_target = cap;
    let lo_target = 0.25 * cap;
    let mut eps = eps_start.max(1e-300);
    let mut v = rg_at(eps);
    if v >= lo_target && v <= hi_target {
        return LogDetRepulsion { value: v, tilde_h, epsilon: eps, degenerate: false };
    }
    // bracket the window
    let (mut lo_eps, mut hi_eps);
    if v > hi_target {
        // value too large: grow ε
        lo_eps = eps;
        hi_eps = eps;
        while rg_at(hi_eps) > hi_target {
            hi_eps *= 4.0;
        }
    } else {
        // value too small (or negative): shrink ε
        hi_eps = eps;
        lo_eps = eps;
        loop {
            lo_eps *= 0.25;
            let vlo = rg_at(lo_eps);
            if vlo >= lo_target || lo_eps < 1e-300 {
                break;
            }
        }
    }
    for _ in 0..200 {
        let mid = (lo_eps * hi_eps).sqrt();
        v = rg_at(mid);
        if v >= lo_target && v <= hi_target {
            return LogDetRepulsion { value: v, tilde_h, epsilon: mid, degenerate: false };
        }
        if v > hi_target {
            lo_eps = mid;
        } else {
            hi_eps = mid;
        }
        eps = mid;
    }
    // bisection exhausted (pathological conditioning): clamp into the window
    LogDetRepulsion { value: v.clamp(0.0, hi_target), tilde_h, epsilon: eps, degenerate: false }
}

/// The two log-determinant diversity forms built from `G̃_ij = G_ij^{1/2}`:
/// `upper = (1/N) ln det(I − G̃/N)` (undefined at N = 1) and
/// `lower = (2/N) ln det G̃ − ln N`. Both are ≤ 0; the ordering
/// `bma ≥ mean ≥ mean + upper ≥ mean + lower` holds with jittered
/// determinants.
#[derive(Debug, Clone, Copy)]
pub struct DppForms {
    pub upper: Option<f64>,
    pub lower: f64,
    /// Jitter actually consumed by the two factorizations.
    pub jitter: f64,
}

pub fn repulsion_rd(l: &[f64]) -> Result<DppForms, JensenError> {
    let n = l.len();
    let w = hw_inv_sq(l);
    let g_tilde = Matrix::from_fn(n, n, |i, j| {
        let d = l[i] - l[j];
        (-w * d * d / 16.0).exp()
    });
    let (lower_raw, j_lower) = logdet_psd_with_jitter(&g_tilde, LOGDET_JITTER)?;
    let lower = 2.0 / n as f64 * lower_raw - (n as f64).ln();
    if n == 1 {
        return Ok(DppForms { upper: None, lower, jitter: j_lower });
    }
    let shrunk = Matrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - g_tilde.get(i, j) / n as f64
    });
    let (upper_raw, j_upper) = logdet_psd_with_jitter(&shrunk, LOGDET_JITTER)?;
    Ok(DppForms {
        upper: Some(upper_raw / n as f64),
        lower,
        jitter: j_lower.max(j_upper),
    })
}

/// `ln E p − E ln p ≥ 0` over the particle column.
pub fn jensen_gap(l: &[f64]) -> f64 {
    bma_log_predictive(l) - mean(l)
}

/// Gap values implied by the two endpoint choices of the second-order
/// expansion constants; the true gap always lies in `[lower, upper]`.
#[derive(Debug, Clone, Copy)]
pub struct WitnessInterval {
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
}

impl WitnessInterval {
    pub fn brackets(&self) -> bool {
        self.lower <= self.gap + 1e-12 && self.gap <= self.upper + 1e-12
    }
}

/// Evaluate `ln(1 + E[(2g_i²)⁻¹ (e^{L_i} − e^{mean L})²])` at both endpoint
/// choices of the per-particle constants `g_i ∈ [min(e^{L_i}, e^{mean L}),
/// max(e^{L_i}, e^{mean L})]`.
pub fn second_order_equality_witness(l: &[f64]) -> WitnessInterval {
    let mu = mean(l).exp();
    let gap_at = |pick_max: bool| {
        let acc = l
            .iter()
            .map(|li| {
                let p = li.exp();
                let g = if pick_max { p.max(mu) } else { p.min(mu) };
                let d = p - mu;
                d * d / (2.0 * g * g)
            })
            .sum::<f64>()
            / l.len() as f64;
        (1.0 + acc).ln()
    };
    WitnessInterval { lower: gap_at(true), upper: gap_at(false), gap: jensen_gap(l) }
}

/// `(ln a − ln b)² a b ≤ (a − b)²` for positive a, b; equality at a = b.
pub fn lemma_sqrt_check(a: f64, b: f64) -> bool {
    assert!(a > 0.0 && b > 0.0);
    let dl = a.ln() - b.ln();
    dl * dl * a * b <= (a - b) * (a - b) + 1e-12
}

/// Variance of the predictive distribution normalized by its max:
/// `V = (2 max_i p_i²)⁻¹ (1/N) Σ (p_i − p̄)²`. Always in [0, ½].
pub fn predictive_variance_v(p_column: &[f64]) -> f64 {
    assert!(p_column.iter().all(|&p| p > 0.0), "raw likelihoods must be positive");
    let n = p_column.len() as f64;
    let pmax = max(p_column);
    let pbar = p_column.iter().sum::<f64>() / n;
    let var = p_column.iter().map(|p| (p - pbar) * (p - pbar)).sum::<f64>() / n;
    var / (2.0 * pmax * pmax)
}

/// Everything the diagnostics CSV reports for one datum.
#[derive(Debug, Clone)]
pub struct ColumnDiagnostics {
    pub datum_index: usize,
    pub mean_loglik: f64,
    pub bma_loglik: f64,
    pub gap: f64,
    pub r_h: f64,
    pub r_hm: f64,
    pub r_hmedian: f64,
    pub r_c: f64,
    pub r_w: f64,
    pub r_g: f64,
    pub r_d_upper: f64,
    pub r_d_lower: f64,
    pub hw_inv_sq: f64,
    pub median_m: f64,
    pub tilde_h: f64,
    pub gfsf_epsilon: f64,
    pub chain_ok: bool,
}

pub fn column_diagnostics(
    datum_index: usize,
    l: &[f64],
    gfsf_eps_start: f64,
) -> Result<ColumnDiagnostics, JensenError> {
    let m = mean(l);
    let bma = bma_log_predictive(l);
    let r_h = repulsion_r(BandwidthKind::H, l);
    let rg = repulsion_rg(l, gfsf_eps_start);
    let rd = repulsion_rd(l)?;
    let chain_ok = m <= m + r_h + CHAIN_TOLERANCE && m + r_h <= bma + CHAIN_TOLERANCE;
    Ok(ColumnDiagnostics {
        datum_index,
        mean_loglik: m,
        bma_loglik: bma,
        gap: bma - m,
        r_h,
        r_hm: repulsion_r(BandwidthKind::Hm, l),
        r_hmedian: repulsion_r(BandwidthKind::HMedian, l),
        r_c: repulsion_rc(l),
        r_w: repulsion_rw(l),
        r_g: rg.value,
        r_d_upper: rd.upper.unwrap_or(f64::NAN),
        r_d_lower: rd.lower,
        hw_inv_sq: hw_inv_sq(l),
        median_m: median_m(l),
        tilde_h: rg.tilde_h,
        gfsf_epsilon: rg.epsilon,
        chain_ok,
    })
}

/// Per-datum diagnostics over a whole log-likelihood matrix, with uniform
/// column averages.
#[derive(Debug, Clone)]
pub struct RepulsionReport {
    pub rows: Vec<ColumnDiagnostics>,
}

impl RepulsionReport {
    pub fn from_loglik_matrix(llm: &LogLikMatrix, gfsf_eps_start: f64) -> Result<Self, JensenError> {
        let rows = (0..llm.data())
            .map(|d| column_diagnostics(d, &llm.column(d), gfsf_eps_start))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RepulsionReport { rows })
    }

    pub fn all_chains_ok(&self) -> bool {
        self.rows.iter().all(|r| r.chain_ok)
    }

    pub fn mean_gap(&self) -> f64 {
        self.rows.iter().map(|r| r.gap).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_r(&self, kind: BandwidthKind) -> f64 {
        let pick = |r: &ColumnDiagnostics| match kind {
            BandwidthKind::H => r.r_h,
            BandwidthKind::Hm => r.r_hm,
            BandwidthKind::HMedian => r.r_hmedian,
            BandwidthKind::Hw => r.r_c,
        };
        self.rows.iter().map(pick).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Row-per-datum CSV with the named diagnostic columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "datum_index,gap,R_h,R_hm,R_c,R_w,R_g,R_d_upper,R_d_lower,chain_ok")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.datum_index,
                r.gap,
                r.r_h,
                r.r_hm,
                r.r_c,
                r.r_w,
                r.r_g,
                r.r_d_upper,
                r.r_d_lower,
                r.chain_ok
            )?;
        }
        Ok(())
    }
}
