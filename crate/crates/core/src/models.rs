//! Parametric models `p(x | θ)`, priors `π(θ)`, and exact reverse-mode
//! gradients of log-likelihood and log-prior.
//!
//! Models are fully-connected feed-forward networks with a linear output
//! layer. Parameters live in one flat vector per particle: for each layer the
//! weights in row-major order followed by the biases, and — when the Gaussian
//! observation noise is learnable — a trailing `ln σ` coordinate.

use crate::numerics::{logsumexp, Matrix, NumericsError, Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ParamVector = Vec<f64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("model produced a non-finite output")]
    NonFiniteOutput,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh() * z.tanh(),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Likelihood {
    /// Homoskedastic Gaussian observation noise. `sigma` is the fixed value,
    /// or the initial value when `learnable`.
    Gaussian { sigma: f64, learnable: bool },
    /// Softmax-categorical over `classes` logits.
    Categorical { classes: usize },
}

/// Architecture plus likelihood family; defines `p(x|θ)` together with a
/// parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub likelihood: Likelihood,
}

impl ModelSpec {
    pub fn regression(input_dim: usize, hidden: &[usize], sigma: f64, learnable: bool) -> Self {
        ModelSpec {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim: 1,
            activation: Activation::Relu,
            likelihood: Likelihood::Gaussian { sigma, learnable },
        }
    }

    pub fn classification(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim: classes,
            activation: Activation::Relu,
            likelihood: Likelihood::Categorical { classes },
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims
    }

    pub fn learnable_sigma(&self) -> bool {
        matches!(self.likelihood, Likelihood::Gaussian { learnable: true, .. })
    }

    pub fn param_count(&self) -> usize {
        let dims = self.layer_dims();
        let net: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        net + if self.learnable_sigma() { 1 } else { 0 }
    }

    fn check_params(&self, params: &[f64]) -> Result<(), ModelError> {
        if params.len() != self.param_count() {
            return Err(ModelError::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Observation standard deviation for the Gaussian family.
    pub fn sigma(&self, params: &[f64]) -> f64 {
        match self.likelihood {
            Likelihood::Gaussian { sigma, learnable } => {
                if learnable {
                    params[params.len() - 1].exp()
                } else {
                    sigma
                }
            }
            Likelihood::Categorical { .. } => {
                panic!("sigma requested for a categorical model")
            }
        }
    }

    /// Draw an initial parameter vector: weights scaled Gaussian with
    /// variance 2/fan_in, zero biases, `ln σ` seeded from the spec value.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let dims = self.layer_dims();
        let mut params = Vec::with_capacity(self.param_count());
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(std * rng.normal());
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        if self.learnable_sigma() {
            if let Likelihood::Gaussian { sigma, .. } = self.likelihood {
                params.push(sigma.ln());
            }
        }
        params
    }
}

/// Per-layer forward pass record used by the backward passes.
struct Trace {
    /// Input of each layer (activations), length = number of layers.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn forward_trace(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Trace {
    let dims = spec.layer_dims();
    let layers = dims.len() - 1;
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    let mut a = x.to_vec();
    let mut off = 0;
    for l in 0..layers {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let mut z = vec![0.0; n_out];
        for r in 0..n_out {
            let mut s = params[off + n_in * n_out + r]; // bias
            let wrow = &params[off + r * n_in..off + (r + 1) * n_in];
            for (wi, ai) in wrow.iter().zip(&a) {
                s += wi * ai;
            }
            z[r] = s;
        }
        inputs.push(a);
        let is_last = l == layers - 1;
        a = if is_last {
            z.clone()
        } else {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        pre.push(z);
        off += n_in * n_out + n_out;
    }
    Trace { inputs, pre, output: a }
}

/// Deterministic feed-forward evaluation `f(x; θ)`.
pub fn forward(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let out = forward_trace(spec, params, x).output;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteOutput);
    }
    Ok(out)
}

fn loglik_of_output(spec: &ModelSpec, params: &[f64], out: &[f64], y: &[f64]) -> f64 {
    match spec.likelihood {
        Likelihood::Gaussian { .. } => {
            let sigma = spec.sigma(params);
            let mut ll = 0.0;
            for (f, yv) in out.iter().zip(y) {
                let r = yv - f;
                ll += -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
                    - r * r / (2.0 * sigma * sigma);
            }
            ll
        }
        Likelihood::Categorical { .. } => {
            let class = y[0] as usize;
            out[class] - logsumexp(out)
        }
    }
}

/// ∂(log-lik)/∂f at the given output.
fn dloglik_doutput(spec: &ModelSpec, params: &[f64], out: &[f64], y: &[f64]) -> Vec<f64> {
    match spec.likelihood {
        Likelihood::Gaussian { .. } => {
            let s2 = spec.sigma(params).powi(2);
            out.iter().zip(y).map(|(f, yv)| (yv - f) / s2).collect()
        }
        Likelihood::Categorical { .. } => {
            let class = y[0] as usize;
            let lse = logsumexp(out);
            out.iter()
                .enumerate()
                .map(|(k, &f)| if k == class { 1.0 } else { 0.0 } - (f - lse).exp())
                .collect()
        }
    }
}

/// `ln p(y | f(x; θ))` for one datum.
pub fn log_lik(spec: &ModelSpec, params: &[f64], x: &[f64], y: &[f64]) -> Result<f64, ModelError> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let out = forward(spec, params, x)?;
    let ll = loglik_of_output(spec, params, &out, y);
    if !ll.is_finite() {
        return Err(ModelError::NonFiniteOutput);
    }
    Ok(ll)
}

/// Pull an output-space cotangent back through ∂f/∂θ.
fn vjp(spec: &ModelSpec, params: &[f64], trace: &Trace, cotangent: &[f64]) -> ParamVector {
    let dims = spec.layer_dims();
    let layers = dims.len() - 1;
    let mut grad = vec![0.0; params.len()];
    let mut delta = cotangent.to_vec();
    // layer offsets
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for l in 0..layers {
        offsets.push(off);
        off += dims[l] * dims[l + 1] + dims[l + 1];
    }
    for l in (0..layers).rev() {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let off = offsets[l];
        let a = &trace.inputs[l];
        for r in 0..n_out {
            let d = delta[r];
            let wrow = &mut grad[off + r * n_in..off + (r + 1) * n_in];
            for (g, ai) in wrow.iter_mut().zip(a) {
                *g += d * ai;
            }
            grad[off + n_in * n_out + r] += d;
        }
        if l > 0 {
            let mut prev = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                let wrow = &params[off + r * n_in..off + (r + 1) * n_in];
                for (p, wi) in prev.iter_mut().zip(wrow) {
                    *p += d * wi;
                }
            }
            for (p, z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                *p *= spec.activation.derivative(*z);
            }
            delta = prev;
        }
    }
    grad
}

/// Output, ∂(log-lik)/∂f, and the pullback needed by function-space rules.
pub struct OutputGrad {
    pub output: Vec<f64>,
    pub dloglik_doutput: Vec<f64>,
    trace: Trace,
}

impl OutputGrad {
    /// Contract an output-space cotangent through ∂f/∂θ.
    pub fn pullback(&self, spec: &ModelSpec, params: &[f64], cotangent: &[f64]) -> ParamVector {
        vjp(spec, params, &self.trace, cotangent)
    }
}

/// Evaluate `f`, the likelihood gradient in output space, and keep the tape
/// for cotangent pullbacks.
pub fn grad_output(
    spec: &ModelSpec,
    params: &[f64],
    x: &[f64],
    y: &[f64],
) -> Result<OutputGrad, ModelError> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let trace = forward_trace(spec, params, x);
    if trace.output.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteOutput);
    }
    let d = dloglik_doutput(spec, params, &trace.output, y);
    Ok(OutputGrad { dloglik_doutput: d, output: trace.output.clone(), trace })
}

/// Exact gradient of [`log_lik`] with respect to every parameter.
pub fn grad_log_lik(
    spec: &ModelSpec,
    params: &[f64],
    x: &[f64],
    y: &[f64],
) -> Result<ParamVector, ModelError> {
    let og = grad_output(spec, params, x, y)?;
    let mut grad = og.pullback(spec, params, &og.dloglik_doutput);
    if spec.learnable_sigma() {
        let sigma = spec.sigma(params);
        let mut g = 0.0;
        for (f, yv) in og.output.iter().zip(y) {
            let r = yv - f;
            g += -1.0 + r * r / (sigma * sigma);
        }
        let last = grad.len() - 1;
        grad[last] = g;
    }
    Ok(grad)
}

/// Isotropic Gaussian prior over the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mean: f64,
    pub variance: f64,
}

impl Prior {
    pub fn new(mean: f64, variance: f64) -> Self {
        assert!(variance > 0.0, "prior variance must be positive");
        Prior { mean, variance }
    }

    pub fn unit() -> Self {
        Prior { mean: 0.0, variance: 1.0 }
    }

    pub fn sample(&self, dim: usize, rng: &mut Rng) -> ParamVector {
        (0..dim)
            .map(|_| self.mean + self.variance.sqrt() * rng.normal())
            .collect()
    }
}

/// `ln π(θ)` = sum of per-coordinate Gaussian log densities.
pub fn log_prior(prior: &Prior, params: &[f64]) -> f64 {
    let c = -0.5 * (2.0 * std::f64::consts::PI * prior.variance).ln();
    params
        .iter()
        .map(|&t| {
            let d = t - prior.mean;
            c - d * d / (2.0 * prior.variance)
        })
        .sum()
}

/// `∇ ln π(θ)` = −(θ − mean)/variance per coordinate.
pub fn grad_log_prior(prior: &Prior, params: &[f64]) -> ParamVector {
    params.iter().map(|&t| -(t - prior.mean) / prior.variance).collect()
}

/// Gaussian approximation of the function-space prior on a minibatch,
/// fitted from prior draws.
#[derive(Debug, Clone)]
pub struct FunctionPriorApprox {
    /// Mean of the stacked minibatch outputs (length b·c).
    pub mean: Vec<f64>,
    /// Covariance of the stacked outputs, jittered.
    pub covariance: Matrix,
    pub num_prior_samples: usize,
    jitter: f64,
}

impl FunctionPriorApprox {
    /// Score `∇_f ln N(f | mean, cov)` = −cov⁻¹ (f − mean).
    pub fn score(&self, f: &[f64]) -> Result<Vec<f64>, ModelError> {
        let d: Vec<f64> = f.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let solved = self.covariance.solve_spd(&d, self.jitter)?;
        Ok(solved.into_iter().map(|v| -v).collect())
    }
}

/// Draw `num_samples` parameter vectors from the prior, evaluate the network
/// on the minibatch, and fit a Gaussian to the stacked outputs.
pub fn fit_function_prior(
    spec: &ModelSpec,
    prior: &Prior,
    xs: &[Vec<f64>],
    rng: &mut Rng,
    num_samples: usize,
) -> Result<FunctionPriorApprox, ModelError> {
    assert!(num_samples >= 2, "need at least two prior draws");
    let dim = xs.len() * spec.output_dim;
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let theta = prior.sample(spec.param_count(), rng);
        let mut stacked = Vec::with_capacity(dim);
        for x in xs {
            stacked.extend(forward(spec, &theta, x)?);
        }
        draws.push(stacked);
    }
    let mut mean = vec![0.0; dim];
    for d in &draws {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / num_samples as f64;
        }
    }
    let mut cov = Matrix::zeros(dim, dim);
    for d in &draws {
        for i in 0..dim {
            let di = d[i] - mean[i];
            for j in 0..dim {
                let dj = d[j] - mean[j];
                cov.set(i, j, cov.get(i, j) + di * dj / num_samples as f64);
            }
        }
    }
    // Small sample counts give rank-deficient covariances; jitter scales with
    // the mean diagonal.
    let mean_diag = (0..dim).map(|i| cov.get(i, i)).sum::<f64>() / dim.max(1) as f64;
    let jitter = 1e-6 * mean_diag.max(1e-12);
    for i in 0..dim {
        cov.set(i, i, cov.get(i, i) + jitter);
    }
    Ok(FunctionPriorApprox { mean, covariance: cov, num_prior_samples: num_samples, jitter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn linear_spec() -> ModelSpec {
        ModelSpec::regression(1, &[], 1.0, false)
    }

    #[test]
    fn forward_zero_params_is_zero() {
        let spec = ModelSpec::regression(3, &[4], 1.0, false);
        let params = vec![0.0; spec.param_count()];
        let out = forward(&spec, &params, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn forward_single_linear_layer() {
        let spec = linear_spec();
        // w = 2, b = 1
        let out = forward(&spec, &[2.0, 1.0], &[3.0]).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let spec = ModelSpec::regression(2, &[3], 1.0, false);
        let mut rng = Rng::new(1);
        let params = spec.init_params(&mut rng);
        let x = [0.7, -1.3];
        // naive layer-by-layer recomputation
        let w1 = &params[0..6];
        let b1 = &params[6..9];
        let w2 = &params[9..12];
        let b2 = params[12];
        let mut h = [0.0; 3];
        for r in 0..3 {
            h[r] = (w1[r * 2] * x[0] + w1[r * 2 + 1] * x[1] + b1[r]).max(0.0);
        }
        let expect = w2[0] * h[0] + w2[1] * h[1] + w2[2] * h[2] + b2;
        let out = forward(&spec, &params, &x).unwrap();
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let spec = linear_spec();
        assert!(matches!(
            forward(&spec, &[2.0, 1.0], &[1.0, 2.0]),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn log_lik_zero_residual_gaussian() {
        let spec = linear_spec();
        // f(1) = 3, y = 3
        let ll = log_lik(&spec, &[2.0, 1.0], &[1.0], &[3.0]).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_lik_symmetric_two_class() {
        let spec = ModelSpec::classification(1, &[], 2);
        let params = vec![0.0; spec.param_count()];
        let ll = log_lik(&spec, &params, &[0.3], &[0.0]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_lik_matches_density_formula() {
        let spec = ModelSpec::regression(1, &[], 0.2, false);
        let (w, b) = (1.4, -0.3);
        let (x, y) = (0.45, 0.8);
        let f = w * x + b;
        let oracle = -0.5 * (2.0 * std::f64::consts::PI * 0.04).ln() - (y - f) * (y - f) / 0.08;
        let ll = log_lik(&spec, &[w, b], &[x], &[y]).unwrap();
        assert!((ll - oracle).abs() < 1e-12);
    }

    #[test]
    fn grad_log_lik_hand_linear_case() {
        // y = w x, gaussian sigma = 1: d/dw = (y − wx)x at w=0, x=2, y=1 -> 2
        let spec = linear_spec();
        let g = grad_log_lik(&spec, &[0.0, 0.0], &[2.0], &[1.0]).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grad_log_lik_zero_residual_output_layer() {
        let spec = ModelSpec::regression(1, &[2], 1.0, false);
        let mut rng = Rng::new(9);
        let params = spec.init_params(&mut rng);
        let x = [0.8];
        let y = forward(&spec, &params, &x).unwrap();
        let g = grad_log_lik(&spec, &params, &x, &y).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let specs = [
            ModelSpec::regression(2, &[4], 0.5, false),
            ModelSpec::regression(2, &[3, 3], 0.3, true),
            ModelSpec::classification(2, &[4], 3),
        ];
        for spec in &specs {
            let y = match spec.likelihood {
                Likelihood::Gaussian { .. } => vec![0.7],
                Likelihood::Categorical { .. } => vec![1.0],
            };
            for _ in 0..20 {
                // tanh keeps the check away from relu kinks
                let mut spec = spec.clone();
                spec.activation = Activation::Tanh;
                let params = spec.init_params(&mut rng);
                let x = vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
                let g = grad_log_lik(&spec, &params, &x, &y).unwrap();
                let fd = finite_diff_grad(
                    |p| log_lik(&spec, p, &x, &y).unwrap(),
                    &params,
                    1e-5,
                )
                .unwrap();
                for (a, b) in g.iter().zip(&fd) {
                    let rel = (a - b).abs() / b.abs().max(1e-3);
                    assert!(rel < 1e-4, "analytic {a} vs fd {b}");
                }
            }
        }
    }

    #[test]
    fn grad_output_gaussian_unit_sigma() {
        let spec = linear_spec();
        let og = grad_output(&spec, &[0.0, 0.0], &[1.0], &[1.0]).unwrap();
        assert!((og.dloglik_doutput[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pullback_of_zero_cotangent_is_zero() {
        let spec = ModelSpec::regression(2, &[3], 1.0, false);
        let mut rng = Rng::new(2);
        let params = spec.init_params(&mut rng);
        let og = grad_output(&spec, &params, &[0.1, 0.2], &[0.0]).unwrap();
        let g = og.pullback(&spec, &params, &[0.0]);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pullback_matches_directional_finite_difference() {
        let mut spec = ModelSpec::classification(2, &[3], 2);
        spec.activation = Activation::Tanh;
        let mut rng = Rng::new(4);
        let params = spec.init_params(&mut rng);
        let x = [0.4, -0.9];
        let v = [0.3, -1.1];
        let og = grad_output(&spec, &params, &x, &[0.0]).unwrap();
        let g = og.pullback(&spec, &params, &v);
        let fd = finite_diff_grad(
            |p| {
                let out = forward(&spec, p, &x).unwrap();
                out.iter().zip(&v).map(|(o, vi)| o * vi).sum()
            },
            &params,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn chain_consistency_grad_log_lik_vs_pullback() {
        let spec = ModelSpec::classification(2, &[4], 3);
        let mut rng = Rng::new(6);
        let params = spec.init_params(&mut rng);
        let x = [0.2, 0.5];
        let y = [2.0];
        let direct = grad_log_lik(&spec, &params, &x, &y).unwrap();
        let og = grad_output(&spec, &params, &x, &y).unwrap();
        let chained = og.pullback(&spec, &params, &og.dloglik_doutput);
        for (a, b) in direct.iter().zip(&chained) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn categorical_likelihood_normalizes() {
        let spec = ModelSpec::classification(1, &[2], 3);
        let mut rng = Rng::new(8);
        let params = spec.init_params(&mut rng);
        let x = [0.3];
        let total: f64 = (0..3)
            .map(|c| log_lik(&spec, &params, &x, &[c as f64]).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_prior_at_mean_and_hand_case() {
        let prior = Prior::unit();
        let lp = log_prior(&prior, &[0.0]);
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        // θ = (1, 0): log density = −ln(2π) − 1/2, gradient (−1, 0)
        let lp = log_prior(&prior, &[1.0, 0.0]);
        assert!((lp + (2.0 * std::f64::consts::PI).ln() + 0.5).abs() < 1e-12);
        let g = grad_log_prior(&prior, &[1.0, 0.0]);
        assert_eq!(g, vec![-1.0, 0.0]);
    }

    #[test]
    fn log_prior_matches_density_oracle() {
        let prior = Prior::new(0.0, 2.0);
        let mut rng = Rng::new(12);
        let theta: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let oracle: f64 = theta
            .iter()
            .map(|t| -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - t * t / 4.0)
            .sum();
        assert!((log_prior(&prior, &theta) - oracle).abs() < 1e-12);
        let g = grad_log_prior(&prior, &theta);
        let fd = finite_diff_grad(|p| log_prior(&prior, p), &theta, 1e-6).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn function_prior_zero_network() {
        // identity activation with zero weights gives exactly zero outputs
        let mut spec = ModelSpec::regression(1, &[2], 1.0, false);
        spec.activation = Activation::Identity;
        let prior = Prior::new(0.0, 1e-30);
        let mut rng = Rng::new(3);
        let fp = fit_function_prior(&spec, &prior, &[vec![1.0], vec![2.0]], &mut rng, 16).unwrap();
        assert!(fp.mean.iter().all(|m| m.abs() < 1e-10));
        // diagonal is pure jitter
        assert!(fp.covariance.get(0, 0) > 0.0 && fp.covariance.get(0, 0) < 1e-10);
    }

    #[test]
    fn function_prior_two_equal_draws_leaves_pure_jitter() {
        // a near-degenerate prior forces both draws to coincide
        let spec = ModelSpec::regression(1, &[], 1.0, false);
        let prior = Prior::new(0.4, 1e-30);
        let mut rng = Rng::new(5);
        let fp = fit_function_prior(&spec, &prior, &[vec![1.0]], &mut rng, 2).unwrap();
        assert!(fp.covariance.get(0, 0) > 0.0 && fp.covariance.get(0, 0) < 1e-9);
        assert_eq!(fp.num_prior_samples, 2);
    }

    #[test]
    fn function_prior_linear_model_covariance() {
        // f = w x + b with w, b ~ N(0, 1): cov[i][j] = x_i x_j + 1
        let spec = ModelSpec::regression(1, &[], 1.0, false);
        let prior = Prior::unit();
        let mut rng = Rng::new(17);
        let xs = vec![vec![1.0], vec![2.0]];
        let fp = fit_function_prior(&spec, &prior, &xs, &mut rng, 10_000).unwrap();
        let oracle = [[2.0, 3.0], [3.0, 5.0]];
        for i in 0..2 {
            for j in 0..2 {
                let got = fp.covariance.get(i, j);
                assert!(
                    (got - oracle[i][j]).abs() / oracle[i][j] < 0.1,
                    "cov[{i}][{j}] = {got}"
                );
            }
        }
    }
}
