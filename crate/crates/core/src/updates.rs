//! Objectives and particle update rules.
//!
//! Every rule exposes the *ascent* direction that the training loop adds to
//! each particle (scaled by the step size or fed through the adaptive-moment
//! optimizer). Objective-based rules (`dpp`, `pac2e`, `var`, `var_svgd`)
//! define a scalar loss to minimize; their direction is the negated exact
//! gradient. At N = 1 every direction collapses to the plain gradient of the
//! log-joint.

use crate::ensemble::{loglik_matrix, EnsembleError, ParticleEnsemble};
use crate::harness::data::Dataset;
use crate::jensen::{self, BandwidthKind};
use crate::models::{self, FunctionPriorApprox, ModelError, ParamVector, Prior};
use crate::numerics::{logdet_psd, median, sq_dist, Matrix, Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ridge added to kernel Gram matrices before inversion.
pub const GFSF_RIDGE: f64 = 1e-2;
/// Diagonal shift defining the regularized log-determinant objective.
pub const DPP_LOGDET_SHIFT: f64 = 1e-10;
/// Prior draws used to fit the function-space prior per minibatch.
pub const FUNCTION_PRIOR_SAMPLES: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("objective or direction became non-finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Map,
    Svgd,
    Wsgld,
    Gfsd,
    Gfsf,
    FSvgd,
    FWsgld,
    FGfsd,
    FGfsf,
    Dpp,
    Pac2e,
    Var,
    VarSvgd,
}

impl RuleKind {
    pub fn is_function_space(self) -> bool {
        matches!(self, RuleKind::FSvgd | RuleKind::FWsgld | RuleKind::FGfsd | RuleKind::FGfsf)
    }

    pub fn parse(name: &str) -> Option<RuleKind> {
        Some(match name {
            "map" => RuleKind::Map,
            "svgd" => RuleKind::Svgd,
            "wsgld" | "w-sgld" => RuleKind::Wsgld,
            "gfsd" => RuleKind::Gfsd,
            "gfsf" => RuleKind::Gfsf,
            "f_svgd" | "f-svgd" => RuleKind::FSvgd,
            "f_wsgld" | "f-wsgld" => RuleKind::FWsgld,
            "f_gfsd" | "f-gfsd" => RuleKind::FGfsd,
            "f_gfsf" | "f-gfsf" => RuleKind::FGfsf,
            "dpp" => RuleKind::Dpp,
            "pac2e" => RuleKind::Pac2e,
            "var" => RuleKind::Var,
            "var_svgd" | "var-svgd" => RuleKind::VarSvgd,
            _ => return None,
        })
    }
}

/// Kernel bandwidth policy for parameter/function-space Gram matrices.
/// `Fixed` carries the squared bandwidth h².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelBandwidth {
    MedianTrick,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Plain,
    AdaptiveMoment { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::AdaptiveMoment { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: RuleKind,
    /// Loss-bandwidth for the variance-regularized objectives.
    pub bandwidth: BandwidthKind,
    pub kernel_bandwidth: KernelBandwidth,
    pub step_size: f64,
    pub optimizer: Optimizer,
}

impl UpdateRule {
    pub fn new(kind: RuleKind, step_size: f64) -> Self {
        assert!(step_size > 0.0);
        UpdateRule {
            kind,
            bandwidth: BandwidthKind::H,
            kernel_bandwidth: KernelBandwidth::MedianTrick,
            step_size,
            optimizer: Optimizer::adam(),
        }
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub objective_value: f64,
    pub grad_norms: Vec<f64>,
    pub repulsion_magnitudes: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn pairwise_sq_dists(points: &[Vec<f64>]) -> Matrix {
    let n = points.len();
    Matrix::from_fn(n, n, |i, j| sq_dist(&points[i], &points[j]))
}

/// Squared bandwidth from the median heuristic:
/// `h² = median(off-diagonal squared distances) / ln N`, floored at 1e-12.
pub fn median_trick_bandwidth(pairwise_sq: &Matrix) -> f64 {
    let n = pairwise_sq.rows();
    assert!(n >= 2, "median trick needs at least two particles");
    let mut off = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            off.push(pairwise_sq.get(i, j));
        }
    }
    (median(&off) / (n as f64).ln()).max(1e-12)
}

fn kernel_h2(policy: KernelBandwidth, points: &[Vec<f64>]) -> f64 {
    match policy {
        KernelBandwidth::MedianTrick => {
            if points.len() < 2 {
                1.0
            } else {
                median_trick_bandwidth(&pairwise_sq_dists(points))
            }
        }
        KernelBandwidth::Fixed(h2) => h2.max(1e-12),
    }
}

/// Which kernel-interaction pattern a rule applies to smoothed gradients and
/// repulsion; shared between parameter space and function space.
#[derive(Clone, Copy, PartialEq)]
enum InteractionKind {
    Svgd,
    Wsgld,
    Gfsd,
    Gfsf,
}

impl InteractionKind {
    fn of(kind: RuleKind) -> Option<InteractionKind> {
        Some(match kind {
            RuleKind::Svgd | RuleKind::FSvgd => InteractionKind::Svgd,
            RuleKind::Wsgld | RuleKind::FWsgld => InteractionKind::Wsgld,
            RuleKind::Gfsd | RuleKind::FGfsd => InteractionKind::Gfsd,
            RuleKind::Gfsf | RuleKind::FGfsf => InteractionKind::Gfsf,
            _ => return None,
        })
    }
}

/// Kernel-weighted directions in an arbitrary vector space. `grads` are the
/// per-point log-density gradients. Returns the directions and the norm of
/// each point's repulsion component.
fn assemble_interaction(
    kind: InteractionKind,
    points: &[Vec<f64>],
    grads: &[Vec<f64>],
    h2: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = points.len();
    let dim = points[0].len();
    let nf = n as f64;
    let k = Matrix::from_fn(n, n, |i, j| (-sq_dist(&points[i], &points[j]) / (2.0 * h2)).exp());
    // ∂_{θ_j} K_ij for the Gaussian kernel: +(θ_i − θ_j) K_ij / h²
    let rep = |i: usize, j: usize| -> Vec<f64> {
        (0..dim)
            .map(|c| (points[i][c] - points[j][c]) * k.get(i, j) / h2)
            .collect()
    };
    let row_sums: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum()).collect();
    let mut dirs = vec![vec![0.0; dim]; n];
    let mut rep_norms = vec![0.0; n];

    let add = |acc: &mut Vec<f64>, v: &[f64], s: f64| {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += s * b;
        }
    };

    match kind {
        InteractionKind::Svgd | InteractionKind::Gfsd => {
            for i in 0..n {
                let mut repulsion = vec![0.0; dim];
                for j in 0..n {
                    add(&mut dirs[i], &grads[j], k.get(i, j) / nf);
                    add(&mut repulsion, &rep(i, j), 1.0 / nf);
                }
                if kind == InteractionKind::Gfsd {
                    // add the normalized repulsion sums on top of the
                    // smoothed gradient; the gradient itself enters once
                    for j in 0..n {
                        let r = rep(i, j);
                        add(&mut repulsion, &r, 1.0 / row_sums[j]);
                        add(&mut repulsion, &r, 1.0 / row_sums[i]);
                    }
                }
                rep_norms[i] = norm(&repulsion);
                let d = dirs[i].clone();
                dirs[i] = d.iter().zip(&repulsion).map(|(a, b)| a + b).collect();
            }
        }
        InteractionKind::Wsgld => {
            for i in 0..n {
                dirs[i] = grads[i].clone();
                let mut repulsion = vec![0.0; dim];
                for j in 0..n {
                    let r = rep(i, j);
                    add(&mut repulsion, &r, 1.0 / row_sums[j]);
                    add(&mut repulsion, &r, 1.0 / row_sums[i]);
                }
                rep_norms[i] = norm(&repulsion);
                let d = dirs[i].clone();
                dirs[i] = d.iter().zip(&repulsion).map(|(a, b)| a + b).collect();
            }
        }
        InteractionKind::Gfsf => {
            let mut shifted = k.clone();
            for i in 0..n {
                shifted.set(i, i, shifted.get(i, i) + GFSF_RIDGE);
            }
            let w = shifted.inverse_spd(0.0).expect("ridged kernel Gram is positive definite");
            for i in 0..n {
                dirs[i] = grads[i].clone();
                let mut repulsion = vec![0.0; dim];
                for j in 0..n {
                    add(&mut repulsion, &rep(i, j), w.get(i, j) / nf);
                }
                rep_norms[i] = norm(&repulsion);
                let d = dirs[i].clone();
                dirs[i] = d.iter().zip(&repulsion).map(|(a, b)| a + b).collect();
            }
        }
    }
    (dirs, rep_norms)
}

/// ∇_θ [scale · Σ_d ln p(x_d|θ) + ln π(θ)] per particle.
fn grad_log_joint(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    scale: f64,
) -> Result<Vec<ParamVector>, ModelError> {
    let mut out = Vec::with_capacity(ens.len());
    for p in ens.particles() {
        let mut g = models::grad_log_prior(prior, p);
        for d in 0..data.len() {
            let gl = models::grad_log_lik(&ens.spec, p, data.input(d), data.target(d))?;
            for (a, b) in g.iter_mut().zip(&gl) {
                *a += scale * b;
            }
        }
        out.push(g);
    }
    Ok(out)
}

fn log_joint_objective(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    scale: f64,
) -> Result<f64, TrainError> {
    let llm = loglik_matrix(ens, data)?;
    let n = ens.len() as f64;
    let mut acc = 0.0;
    for (i, p) in ens.particles().iter().enumerate() {
        let data_term: f64 = (0..data.len()).map(|d| llm.values.get(i, d)).sum();
        acc += scale * data_term + models::log_prior(prior, p);
    }
    Ok(-acc / n)
}

fn rule_directions_param_space(
    kind: InteractionKind,
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
    scale: f64,
) -> Result<(Vec<ParamVector>, Vec<f64>), ModelError> {
    let grads = grad_log_joint(ens, data, prior, scale)?;
    let h2 = kernel_h2(kernel, ens.particles());
    Ok(assemble_interaction(kind, ens.particles(), &grads, h2))
}

/// Kernel-smoothed gradient plus kernel repulsion on parameters.
pub fn svgd_direction(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
) -> Result<Vec<ParamVector>, ModelError> {
    Ok(rule_directions_param_space(InteractionKind::Svgd, ens, data, prior, kernel, 1.0)?.0)
}

/// Plain gradient plus the two row-normalized repulsion sums.
pub fn wsgld_direction(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
) -> Result<Vec<ParamVector>, ModelError> {
    Ok(rule_directions_param_space(InteractionKind::Wsgld, ens, data, prior, kernel, 1.0)?.0)
}

/// Smoothed gradient with both repulsion families; the gradient enters once
/// so the single-particle case still collapses to the plain gradient.
pub fn gfsd_direction(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
) -> Result<Vec<ParamVector>, ModelError> {
    Ok(rule_directions_param_space(InteractionKind::Gfsd, ens, data, prior, kernel, 1.0)?.0)
}

/// Plain gradient plus inverse-Gram-weighted repulsion.
pub fn gfsf_direction(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
) -> Result<Vec<ParamVector>, ModelError> {
    Ok(rule_directions_param_space(InteractionKind::Gfsf, ens, data, prior, kernel, 1.0)?.0)
}

/// Function-space update: kernels and repulsion act on stacked minibatch
/// outputs, the resulting output-space direction is pulled back through
/// ∂f/∂θ. `data_scale` is the full-data over minibatch rescaling D/b.
pub fn function_space_direction(
    kind: RuleKind,
    ens: &ParticleEnsemble,
    batch: &Dataset,
    function_prior: &FunctionPriorApprox,
    data_scale: f64,
    kernel: KernelBandwidth,
) -> Result<Vec<ParamVector>, ModelError> {
    let interaction = InteractionKind::of(kind).expect("function-space rule expected");
    assert!(kind.is_function_space(), "use the parameter-space entry points instead");
    let n = ens.len();
    let b = batch.len();
    let c = ens.spec.output_dim;

    let mut stacked = Vec::with_capacity(n);
    let mut glp = Vec::with_capacity(n);
    let mut tapes: Vec<Vec<models::OutputGrad>> = Vec::with_capacity(n);
    for p in ens.particles() {
        let mut f = Vec::with_capacity(b * c);
        let mut g = Vec::with_capacity(b * c);
        let mut per_datum = Vec::with_capacity(b);
        for d in 0..b {
            let og = models::grad_output(&ens.spec, p, batch.input(d), batch.target(d))?;
            f.extend_from_slice(&og.output);
            g.extend(og.dloglik_doutput.iter().map(|v| data_scale * v));
            per_datum.push(og);
        }
        let score = function_prior.score(&f)?;
        for (a, s) in g.iter_mut().zip(&score) {
            *a += s;
        }
        stacked.push(f);
        glp.push(g);
        tapes.push(per_datum);
    }

    let h2 = kernel_h2(kernel, &stacked);
    let (v, _) = assemble_interaction(interaction, &stacked, &glp, h2);

    let mut dirs = Vec::with_capacity(n);
    for i in 0..n {
        let mut dir = vec![0.0; ens.spec.param_count()];
        for d in 0..b {
            let cot = &v[i][d * c..(d + 1) * c];
            let pulled = tapes[i][d].pullback(&ens.spec, ens.particle(i), cot);
            for (a, bb) in dir.iter_mut().zip(&pulled) {
                *a += bb;
            }
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

// ---------------------------------------------------------------------------
// Loss-space derivative machinery shared by the objective-based rules.
// ---------------------------------------------------------------------------

fn argmax(l: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in l.iter().enumerate() {
        if *v > l[best] {
            best = i;
        }
    }
    best
}

fn argmin(l: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in l.iter().enumerate() {
        if *v < l[best] {
            best = i;
        }
    }
    best
}

/// Indices realizing the median (one for odd N, the two middle for even),
/// each with its averaging weight.
fn median_selector(l: &[f64]) -> Vec<(usize, f64)> {
    let n = l.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| l[a].partial_cmp(&l[b]).unwrap().then(a.cmp(&b)));
    if n % 2 == 1 {
        vec![(idx[n / 2], 1.0)]
    } else {
        vec![(idx[n / 2 - 1], 0.5), (idx[n / 2], 0.5)]
    }
}

/// Value of the weighted-variance repulsion together with its exact
/// derivative with respect to every log-likelihood, differentiating through
/// the bandwidth. Max/min/median selectors are treated as locally constant
/// index choices, ties broken toward the lowest index.
pub fn repulsion_value_and_loss_grad(kind: BandwidthKind, l: &[f64]) -> (f64, Vec<f64>) {
    let n = l.len();
    let nf = n as f64;
    let m = l.iter().sum::<f64>() / nf;
    let i_max = argmax(l);
    let l_max = l[i_max];

    // exponent a_i = own_i + anchor − 2 L_max
    // per-particle kinds: own_i = L_i; pairwise kind: own_i = L_min
    let (anchor, own_is_self): (f64, bool) = match kind {
        BandwidthKind::H => (m, true),
        BandwidthKind::Hm => (l[argmin(l)], true),
        BandwidthKind::HMedian => (median(l) - jensen::median_m(l).sqrt(), true),
        BandwidthKind::Hw => (m, false),
    };
    let i_min = argmin(l);
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let own = if own_is_self { l[i] } else { l[i_min] };
            (own + anchor - 2.0 * l_max).exp()
        })
        .collect();
    let s: Vec<f64> = l.iter().map(|li| li - m).collect();
    let s1: f64 = weights.iter().zip(&s).map(|(w, si)| w * si).sum();
    let s2: f64 = weights.iter().zip(&s).map(|(w, si)| w * si * si).sum();
    let value = s2 / (4.0 * nf);

    // anchor derivative per coordinate
    let msel = if kind == BandwidthKind::HMedian { median_selector(l) } else { vec![] };
    let m2 = if kind == BandwidthKind::HMedian { jensen::median_m(l) } else { 0.0 };
    let anchor_grad = |k: usize| -> f64 {
        match kind {
            BandwidthKind::H | BandwidthKind::Hw => 1.0 / nf,
            BandwidthKind::Hm => {
                if k == i_min {
                    1.0
                } else {
                    0.0
                }
            }
            BandwidthKind::HMedian => {
                let med_part: f64 =
                    msel.iter().map(|&(i, w)| if i == k { w } else { 0.0 }).sum();
                let moment_part = if m2 > 1e-300 { l[k] / (nf * m2.sqrt()) } else { 0.0 };
                med_part - moment_part
            }
        }
    };

    let grad: Vec<f64> = (0..n)
        .map(|k| {
            let own_term = if own_is_self {
                weights[k] * s[k] * s[k]
            } else if k == i_min {
                s2
            } else {
                0.0
            };
            let anchor_term = anchor_grad(k) * s2;
            let max_term = if k == i_max { -2.0 * s2 } else { 0.0 };
            let dev_term = 2.0 * weights[k] * s[k] - 2.0 * s1 / nf;
            (own_term + anchor_term + max_term + dev_term) / (4.0 * nf)
        })
        .collect();
    (value, grad)
}

/// Normalized predictive variance and its derivative with respect to the
/// log-likelihoods, treating the max as a locally constant selector.
pub fn predictive_variance_and_loss_grad(l: &[f64]) -> (f64, Vec<f64>) {
    let n = l.len();
    let nf = n as f64;
    let p: Vec<f64> = l.iter().map(|li| li.exp()).collect();
    let i_max = argmax(&p);
    let pmax = p[i_max];
    let pbar = p.iter().sum::<f64>() / nf;
    let var = p.iter().map(|pi| (pi - pbar) * (pi - pbar)).sum::<f64>() / nf;
    let v = var / (2.0 * pmax * pmax);
    let grad = (0..n)
        .map(|k| {
            let mut g = p[k] * (p[k] - pbar) / (nf * pmax * pmax);
            if k == i_max {
                g -= 2.0 * v;
            }
            g
        })
        .collect();
    (v, grad)
}

/// Assemble an objective of the shape
/// `−scale · Σ_d [mean(L_d) + T(L_d)] + KL(ρ_E, π)` and its exact gradient,
/// where `T` is a per-column term with a loss-space derivative.
fn column_objective_and_grad(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    scale: f64,
    term: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    want_grad: bool,
) -> Result<(f64, Option<Vec<ParamVector>>, Vec<f64>), TrainError> {
    let llm = loglik_matrix(ens, data)?;
    let n = ens.len();
    let nf = n as f64;
    let mut value = 0.0;
    // coefficient on ∇_θ L_di accumulated over data
    let mut coeff = vec![vec![0.0; data.len()]; n];
    let mut rep_coeff = vec![vec![0.0; data.len()]; n];
    for d in 0..data.len() {
        let col = llm.column(d);
        let mcol = col.iter().sum::<f64>() / nf;
        let (t, dt) = term(&col);
        value -= scale * (mcol + t);
        for i in 0..n {
            coeff[i][d] = -scale * (1.0 / nf + dt[i]);
            rep_coeff[i][d] = -scale * dt[i];
        }
    }
    value += crate::pacbayes::kl_ensemble_prior(ens, prior);
    if !value.is_finite() {
        return Err(TrainError::Diverged { step: 0 });
    }
    if !want_grad {
        return Ok((value, None, vec![0.0; n]));
    }
    let mut grads = Vec::with_capacity(n);
    let mut rep_norms = vec![0.0; n];
    for (i, p) in ens.particles().iter().enumerate() {
        let mut g = vec![0.0; p.len()];
        let mut rep = vec![0.0; p.len()];
        for d in 0..data.len() {
            let gl = models::grad_log_lik(&ens.spec, p, data.input(d), data.target(d))?;
            for ((a, r), b) in g.iter_mut().zip(rep.iter_mut()).zip(&gl) {
                *a += coeff[i][d] * b;
                *r += rep_coeff[i][d] * b;
            }
        }
        // KL part: −(1/N) ∇ ln π(θ_i)
        let gp = models::grad_log_prior(prior, p);
        for (a, b) in g.iter_mut().zip(&gp) {
            *a -= b / nf;
        }
        rep_norms[i] = norm(&rep);
        grads.push(g);
    }
    Ok((value, Some(grads), rep_norms))
}

/// Variance-regularized objective:
/// `−Σ_d [mean(L_d) + R(L_d, kind)] + KL(ρ_E, π)`.
pub fn var_objective(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kind: BandwidthKind,
) -> Result<f64, TrainError> {
    let term = move |l: &[f64]| repulsion_value_and_loss_grad(kind, l);
    Ok(column_objective_and_grad(ens, data, prior, 1.0, &term, false)?.0)
}

/// Exact gradient of [`var_objective`] for every particle, differentiating
/// through the bandwidths.
pub fn var_grad(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kind: BandwidthKind,
) -> Result<Vec<ParamVector>, TrainError> {
    let term = move |l: &[f64]| repulsion_value_and_loss_grad(kind, l);
    Ok(column_objective_and_grad(ens, data, prior, 1.0, &term, true)?.1.unwrap())
}

/// Predictive-variance objective:
/// `−Σ_d [mean(L_d) + V(L_d)] + KL(ρ_E, π)`.
pub fn pac2e_objective(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
) -> Result<f64, TrainError> {
    let term = |l: &[f64]| predictive_variance_and_loss_grad(l);
    Ok(column_objective_and_grad(ens, data, prior, 1.0, &term, false)?.0)
}

pub fn pac2e_grad(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
) -> Result<Vec<ParamVector>, TrainError> {
    let term = |l: &[f64]| predictive_variance_and_loss_grad(l);
    Ok(column_objective_and_grad(ens, data, prior, 1.0, &term, true)?.1.unwrap())
}

struct DppKernel {
    k: Matrix,
    h2: f64,
    /// median pair selector with averaging weights; empty when the floor binds
    selector: Vec<(usize, usize, f64)>,
}

fn dpp_kernel(particles: &[Vec<f64>], kernel: KernelBandwidth) -> DppKernel {
    let n = particles.len();
    let d2 = pairwise_sq_dists(particles);
    let (h2, selector) = match kernel {
        KernelBandwidth::Fixed(h2) => (h2.max(1e-12), vec![]),
        KernelBandwidth::MedianTrick => {
            if n < 2 {
                (1.0, vec![])
            } else {
                let mut pairs: Vec<(usize, usize)> = Vec::new();
                for i in 0..n {
                    for j in (i + 1)..n {
                        pairs.push((i, j));
                    }
                }
                pairs.sort_by(|a, b| {
                    d2.get(a.0, a.1).partial_cmp(&d2.get(b.0, b.1)).unwrap()
                });
                let m = pairs.len();
                let sel: Vec<(usize, usize, f64)> = if m % 2 == 1 {
                    vec![(pairs[m / 2].0, pairs[m / 2].1, 1.0)]
                } else {
                    vec![
                        (pairs[m / 2 - 1].0, pairs[m / 2 - 1].1, 0.5),
                        (pairs[m / 2].0, pairs[m / 2].1, 0.5),
                    ]
                };
                let med = sel.iter().map(|&(a, b, w)| w * d2.get(a, b)).sum::<f64>();
                let h2 = med / (n as f64).ln();
                if h2 < 1e-12 {
                    (1e-12, vec![])
                } else {
                    (h2, sel)
                }
            }
        }
    };
    let k = Matrix::from_fn(n, n, |i, j| (-d2.get(i, j) / (2.0 * h2)).exp());
    DppKernel { k, h2, selector }
}

/// Negated diversity-regularized log-joint:
/// `−(1/N) Σ_i [Σ_d L_di + ln π(θ_i)] − ln det(K + shift·I)` with the
/// parameter-space Gaussian Gram K.
pub fn dpp_objective(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
) -> Result<f64, TrainError> {
    dpp_objective_scaled(ens, data, prior, kernel, 1.0)
}

fn dpp_objective_scaled(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
    scale: f64,
) -> Result<f64, TrainError> {
    let base = log_joint_objective(ens, data, prior, scale)?;
    let kern = dpp_kernel(ens.particles(), kernel);
    let ld = logdet_psd(&kern.k, DPP_LOGDET_SHIFT)
        .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;
    Ok(base - ld)
}

/// Exact gradient of [`dpp_objective`], including the dependence of the
/// median-trick bandwidth on the particles (selector treated as locally
/// constant).
pub fn dpp_grad(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
) -> Result<Vec<ParamVector>, TrainError> {
    dpp_grad_scaled(ens, data, prior, kernel, 1.0)
}

fn dpp_grad_scaled(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kernel: KernelBandwidth,
    scale: f64,
) -> Result<Vec<ParamVector>, TrainError> {
    let n = ens.len();
    let nf = n as f64;
    let dim = ens.spec.param_count();
    let joint = grad_log_joint(ens, data, prior, scale)?;
    let mut grads: Vec<ParamVector> =
        joint.into_iter().map(|g| g.iter().map(|v| -v / nf).collect()).collect();

    let kern = dpp_kernel(ens.particles(), kernel);
    let mut shifted = kern.k.clone();
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + DPP_LOGDET_SHIFT);
    }
    let w = shifted
        .inverse_spd(0.0)
        .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;

    // −∂ ln det / ∂θ_i: pair-distance part plus the bandwidth part
    let particles = ens.particles();
    let h2 = kern.h2;
    // S = Σ_ab W_ab K_ab d²_ab for the bandwidth chain term
    let mut s_tot = 0.0;
    for a in 0..n {
        for b in 0..n {
            s_tot += w.get(a, b) * kern.k.get(a, b) * sq_dist(&particles[a], &particles[b]);
        }
    }
    for i in 0..n {
        // direct dependence through row/column i
        for j in 0..n {
            let wk = w.get(i, j) * kern.k.get(i, j);
            for c in 0..dim {
                let diff = particles[i][c] - particles[j][c];
                // ∂K_ij/∂θ_i = −(θ_i − θ_j) K_ij / h²; both symmetric slots
                grads[i][c] -= -2.0 * wk * diff / h2;
            }
        }
        // bandwidth dependence: ∂h²/∂θ_i through the selected median pairs
        if !kern.selector.is_empty() {
            let ln_n = (n as f64).ln();
            for &(a, b, wt) in &kern.selector {
                if a != i && b != i {
                    continue;
                }
                let other = if a == i { b } else { a };
                for c in 0..dim {
                    let dh2 = wt * 2.0 * (particles[i][c] - particles[other][c]) / ln_n;
                    grads[i][c] -= s_tot / (2.0 * h2 * h2) * dh2;
                }
            }
        }
    }
    Ok(grads)
}

/// Kernel-smoothed variance-regularized gradient with parameter repulsion.
pub fn var_svgd_direction(
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    kind: BandwidthKind,
    kernel: KernelBandwidth,
) -> Result<Vec<ParamVector>, TrainError> {
    let ascent: Vec<ParamVector> = var_grad(ens, data, prior, kind)?
        .into_iter()
        .map(|g| g.iter().map(|v| -v).collect())
        .collect();
    let h2 = kernel_h2(kernel, ens.particles());
    Ok(assemble_interaction(InteractionKind::Svgd, ens.particles(), &ascent, h2).0)
}

// ---------------------------------------------------------------------------
// Derivation-consistency helpers: loss-space gradients of the chain middle
// terms with the scalar bandwidth held fixed.
// ---------------------------------------------------------------------------

/// `mean(L) + R_w(L)` with a frozen scalar inverse-square bandwidth.
pub fn wsgld_middle_term(l: &[f64], hw_inv_sq: f64) -> f64 {
    let n = l.len();
    let nf = n as f64;
    let m = l.iter().sum::<f64>() / nf;
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            let d = l[i] - l[j];
            row += (-hw_inv_sq * d * d / 8.0).exp();
        }
        acc -= (row / nf).ln();
    }
    m + acc / nf
}

/// Exact derivative of [`wsgld_middle_term`] with respect to every entry.
pub fn wsgld_middle_loss_grad(l: &[f64], hw_inv_sq: f64) -> Vec<f64> {
    let n = l.len();
    let nf = n as f64;
    let g = Matrix::from_fn(n, n, |i, j| {
        let d = l[i] - l[j];
        (-hw_inv_sq * d * d / 8.0).exp()
    });
    let sums: Vec<f64> = (0..n).map(|i| g.row(i).iter().sum()).collect();
    (0..n)
        .map(|k| {
            let mut acc = 0.0;
            // row k: every entry depends on L_k
            let mut row_k = 0.0;
            for j in 0..n {
                row_k += -(hw_inv_sq / 4.0) * (l[k] - l[j]) * g.get(k, j);
            }
            acc += row_k / sums[k];
            // rows i ≠ k: only the j = k entry moves
            for i in 0..n {
                if i != k {
                    let dg = (hw_inv_sq / 4.0) * (l[i] - l[k]) * g.get(i, k);
                    acc += dg / sums[i];
                }
            }
            1.0 / nf - acc / nf
        })
        .collect()
}

/// `−(2/(h̃N)) ln det(εI + K)` with frozen rescaling and bandwidth.
pub fn gfsf_logdet_term(l: &[f64], tilde_h: f64, eps: f64, hw_inv_sq: f64) -> f64 {
    let n = l.len();
    let nf = n as f64;
    let coef = tilde_h * nf.ln() * hw_inv_sq / 16.0;
    let k = Matrix::from_fn(n, n, |i, j| {
        let d = l[i] - l[j];
        (-coef * d * d).exp()
    });
    let ld = logdet_psd(&k, eps).expect("shifted Gram is positive definite");
    -2.0 / (tilde_h * nf) * ld
}

/// Exact derivative of [`gfsf_logdet_term`]; the repulsion shape
/// `Σ_j (K+εI)⁻¹_{kj} ∂K_{kj}`.
pub fn gfsf_logdet_loss_grad(l: &[f64], tilde_h: f64, eps: f64, hw_inv_sq: f64) -> Vec<f64> {
    let n = l.len();
    let nf = n as f64;
    let coef = tilde_h * nf.ln() * hw_inv_sq / 16.0;
    let k = Matrix::from_fn(n, n, |i, j| {
        let d = l[i] - l[j];
        (-coef * d * d).exp()
    });
    let mut shifted = k.clone();
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + eps);
    }
    let w = shifted.inverse_spd(0.0).expect("shifted Gram is positive definite");
    (0..n)
        .map(|kk| {
            let mut acc = 0.0;
            for j in 0..n {
                let dkkj = -2.0 * coef * (l[kk] - l[j]) * k.get(kk, j);
                acc += 2.0 * w.get(kk, j) * dkkj;
            }
            -2.0 / (tilde_h * nf) * acc
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(dim: usize) -> Self {
        AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// One direction evaluation on a batch snapshot.
fn batch_directions(
    rule: &UpdateRule,
    ens: &ParticleEnsemble,
    batch: &Dataset,
    prior: &Prior,
    scale: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<ParamVector>, Vec<f64>), TrainError> {
    let n = ens.len();
    match rule.kind {
        RuleKind::Map => {
            let obj = log_joint_objective(ens, batch, prior, scale)?;
            let dirs = grad_log_joint(ens, batch, prior, scale)?;
            Ok((obj, dirs, vec![0.0; n]))
        }
        RuleKind::Svgd | RuleKind::Wsgld | RuleKind::Gfsd | RuleKind::Gfsf => {
            let obj = log_joint_objective(ens, batch, prior, scale)?;
            let (dirs, reps) = rule_directions_param_space(
                InteractionKind::of(rule.kind).unwrap(),
                ens,
                batch,
                prior,
                rule.kernel_bandwidth,
                scale,
            )?;
            Ok((obj, dirs, reps))
        }
        RuleKind::FSvgd | RuleKind::FWsgld | RuleKind::FGfsd | RuleKind::FGfsf => {
            let obj = log_joint_objective(ens, batch, prior, scale)?;
            let mut frng = rng.split();
            let fprior = models::fit_function_prior(
                &ens.spec,
                prior,
                batch.inputs(),
                &mut frng,
                FUNCTION_PRIOR_SAMPLES,
            )?;
            let dirs = function_space_direction(
                rule.kind,
                ens,
                batch,
                &fprior,
                scale,
                rule.kernel_bandwidth,
            )?;
            Ok((obj, dirs, vec![0.0; n]))
        }
        RuleKind::Var => {
            let term = {
                let kind = rule.bandwidth;
                move |l: &[f64]| repulsion_value_and_loss_grad(kind, l)
            };
            let (obj, grads, reps) =
                column_objective_and_grad(ens, batch, prior, scale, &term, true)?;
            let dirs = grads
                .unwrap()
                .into_iter()
                .map(|g| g.iter().map(|v| -v).collect())
                .collect();
            Ok((obj, dirs, reps))
        }
        RuleKind::Pac2e => {
            let term = |l: &[f64]| predictive_variance_and_loss_grad(l);
            let (obj, grads, reps) =
                column_objective_and_grad(ens, batch, prior, scale, &term, true)?;
            let dirs = grads
                .unwrap()
                .into_iter()
                .map(|g| g.iter().map(|v| -v).collect())
                .collect();
            Ok((obj, dirs, reps))
        }
        RuleKind::Dpp => {
            let obj = dpp_objective_scaled(ens, batch, prior, rule.kernel_bandwidth, scale)?;
            let grads = dpp_grad_scaled(ens, batch, prior, rule.kernel_bandwidth, scale)?;
            let dirs = grads.into_iter().map(|g| g.iter().map(|v| -v).collect()).collect();
            Ok((obj, dirs, vec![0.0; n]))
        }
        RuleKind::VarSvgd => {
            let term = {
                let kind = rule.bandwidth;
                move |l: &[f64]| repulsion_value_and_loss_grad(kind, l)
            };
            let (obj, grads, reps) =
                column_objective_and_grad(ens, batch, prior, scale, &term, true)?;
            let ascent: Vec<ParamVector> = grads
                .unwrap()
                .into_iter()
                .map(|g| g.iter().map(|v| -v).collect())
                .collect();
            let h2 = kernel_h2(rule.kernel_bandwidth, ens.particles());
            let (dirs, _) =
                assemble_interaction(InteractionKind::Svgd, ens.particles(), &ascent, h2);
            Ok((obj, dirs, reps))
        }
    }
}

/// Synchronous-batch training: all directions are computed from the same
/// snapshot, then applied; adaptive-moment state is kept per particle.
/// Deterministic given the seed.
pub fn train(
    rule: &UpdateRule,
    ens: &ParticleEnsemble,
    data: &Dataset,
    prior: &Prior,
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<(ParticleEnsemble, Vec<StepReport>), TrainError> {
    assert!(epochs >= 1, "need at least one epoch");
    assert!(batch_size >= 1, "need a positive batch size");
    let d = data.len();
    let full_batch = batch_size >= d;
    let mut particles: Vec<ParamVector> = ens.particles().to_vec();
    let mut adam: Vec<AdamState> =
        particles.iter().map(|p| AdamState::new(p.len())).collect();
    let mut trajectory = Vec::new();
    let mut step_idx = 0usize;

    for _epoch in 0..epochs {
        let order: Vec<usize> =
            if full_batch { (0..d).collect() } else { rng.permutation(d) };
        let chunks: Vec<&[usize]> = if full_batch {
            vec![&order[..]]
        } else {
            order.chunks(batch_size).collect()
        };
        for chunk in chunks {
            let batch = data.subset(chunk);
            let scale = if full_batch { 1.0 } else { d as f64 / chunk.len() as f64 };
            let snapshot = ens.with_particles(particles.clone());
            let (obj, dirs, reps) =
                match batch_directions(rule, &snapshot, &batch, prior, scale, rng) {
                    Ok(v) => v,
                    // an overflowing likelihood is divergence, not a model bug
                    Err(TrainError::Model(ModelError::NonFiniteOutput))
                    | Err(TrainError::Ensemble(EnsembleError::Model(
                        ModelError::NonFiniteOutput,
                    ))) => return Err(TrainError::Diverged { step: step_idx }),
                    Err(e) => return Err(e),
                };
            if !obj.is_finite() || dirs.iter().flatten().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged { step: step_idx });
            }
            let grad_norms: Vec<f64> = dirs.iter().map(|g| norm(g)).collect();
            match rule.optimizer {
                Optimizer::Plain => {
                    for (p, dir) in particles.iter_mut().zip(&dirs) {
                        for (a, b) in p.iter_mut().zip(dir) {
                            *a += rule.step_size * b;
                        }
                    }
                }
                Optimizer::AdaptiveMoment { beta1, beta2, epsilon } => {
                    for ((p, dir), state) in
                        particles.iter_mut().zip(&dirs).zip(adam.iter_mut())
                    {
                        let grad: Vec<f64> = dir.iter().map(|v| -v).collect();
                        state.step(p, &grad, rule.step_size, beta1, beta2, epsilon);
                    }
                }
            }
            trajectory.push(StepReport {
                objective_value: obj,
                grad_norms,
                repulsion_magnitudes: reps,
            });
            step_idx += 1;
        }
    }
    Ok((ens.with_particles(particles), trajectory))
}
