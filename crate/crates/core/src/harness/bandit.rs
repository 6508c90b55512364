//! Contextual-bandit simulator with Thompson sampling over the particle
//! ensemble.
//!
//! The reward model is a multi-head network (one output per action) with
//! Gaussian observation noise on the chosen head only. Each step samples one
//! particle uniformly and takes the argmax of its predicted per-action
//! reward; a uniform-sampling baseline runs on the identical context and
//! noise stream so cumulative pseudo-regret can be reported relative to it.

use crate::ensemble::ParticleEnsemble;
use crate::harness::data::DataError;
use crate::models::{self, ModelError, ModelSpec, ParamVector, Prior};
use crate::numerics::Rng;
use crate::updates::{self, Optimizer, RuleKind, TrainError, UpdateRule};
use std::io::Write;
use std::path::Path;

/// Reward environment: a stream of contexts with per-action expected
/// rewards.
#[derive(Debug, Clone)]
pub enum BanditEnv {
    /// Affine expected rewards `w_a · context + b_a` with Gaussian
    /// observation noise.
    SyntheticLinear { weights: Vec<Vec<f64>>, biases: Vec<f64>, noise_std: f64 },
    /// Classification-structured rewards: action `argmax_a w_a · context`
    /// pays 1, every other action pays 0.
    SyntheticArgmax { weights: Vec<Vec<f64>> },
    /// Replayed table: one row per step, context columns followed by one
    /// realized reward per action.
    Table { contexts: Vec<Vec<f64>>, rewards: Vec<Vec<f64>> },
}

impl BanditEnv {
    /// Random linear environment with unit-scale action weights.
    pub fn synthetic_linear(
        actions: usize,
        context_dim: usize,
        noise_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let scale = 1.0 / (context_dim as f64).sqrt();
        let weights = (0..actions)
            .map(|_| (0..context_dim).map(|_| scale * rng.normal()).collect())
            .collect();
        BanditEnv::SyntheticLinear { weights, biases: vec![0.0; actions], noise_std }
    }

    /// Exploration-hostile variant: action 0 pays a small constant reward,
    /// the remaining actions are risky linear arms with larger upside.
    pub fn synthetic_safe_arm(
        actions: usize,
        context_dim: usize,
        safe_reward: f64,
        noise_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let scale = 1.0 / (context_dim as f64).sqrt();
        let mut weights: Vec<Vec<f64>> = vec![vec![0.0; context_dim]];
        for _ in 1..actions {
            weights.push((0..context_dim).map(|_| scale * rng.normal()).collect());
        }
        let mut biases = vec![0.0; actions];
        biases[0] = safe_reward;
        BanditEnv::SyntheticLinear { weights, biases, noise_std }
    }

    /// Classification-structured environment: one latent linear scorer per
    /// action, unit reward for the top-scoring action only.
    pub fn synthetic_argmax(actions: usize, context_dim: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (context_dim as f64).sqrt();
        let weights = (0..actions)
            .map(|_| (0..context_dim).map(|_| scale * rng.normal()).collect())
            .collect();
        BanditEnv::SyntheticArgmax { weights }
    }

    /// CSV schema: header row, context columns first, then `actions` reward
    /// columns (one realized reward per action per row).
    pub fn from_csv(path: &Path, actions: usize) -> Result<Self, DataError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| DataError::Parse { row: 0, column: String::new(), message: e.to_string() })?;
        let width = reader
            .headers()
            .map_err(|e| DataError::Parse { row: 0, column: String::new(), message: e.to_string() })?
            .len();
        if width <= actions {
            return Err(DataError::Parse {
                row: 0,
                column: String::new(),
                message: format!("need context columns before {actions} reward columns"),
            });
        }
        let ctx_dim = width - actions;
        let mut contexts = Vec::new();
        let mut rewards = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| DataError::Parse {
                row: i + 1,
                column: String::new(),
                message: e.to_string(),
            })?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| DataError::Parse {
                    row: i + 1,
                    column: String::new(),
                    message: e.to_string(),
                })?;
            contexts.push(vals[..ctx_dim].to_vec());
            rewards.push(vals[ctx_dim..].to_vec());
        }
        if contexts.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(BanditEnv::Table { contexts, rewards })
    }

    pub fn num_actions(&self) -> usize {
        match self {
            BanditEnv::SyntheticLinear { weights, .. }
            | BanditEnv::SyntheticArgmax { weights } => weights.len(),
            BanditEnv::Table { rewards, .. } => rewards[0].len(),
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            BanditEnv::SyntheticLinear { weights, .. }
            | BanditEnv::SyntheticArgmax { weights } => weights[0].len(),
            BanditEnv::Table { contexts, .. } => contexts[0].len(),
        }
    }

    fn context(&self, t: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            BanditEnv::SyntheticLinear { weights, .. }
            | BanditEnv::SyntheticArgmax { weights } => {
                (0..weights[0].len()).map(|_| rng.normal()).collect()
            }
            BanditEnv::Table { contexts, .. } => contexts[t % contexts.len()].clone(),
        }
    }

    fn expected_rewards(&self, t: usize, ctx: &[f64]) -> Vec<f64> {
        match self {
            BanditEnv::SyntheticLinear { weights, biases, .. } => weights
                .iter()
                .zip(biases)
                .map(|(w, b)| w.iter().zip(ctx).map(|(a, x)| a * x).sum::<f64>() + b)
                .collect(),
            BanditEnv::SyntheticArgmax { weights } => {
                let scores: Vec<f64> = weights
                    .iter()
                    .map(|w| w.iter().zip(ctx).map(|(a, x)| a * x).sum())
                    .collect();
                let mut best = 0;
                for (a, v) in scores.iter().enumerate() {
                    if *v > scores[best] {
                        best = a;
                    }
                }
                (0..weights.len()).map(|a| if a == best { 1.0 } else { 0.0 }).collect()
            }
            BanditEnv::Table { rewards, .. } => rewards[t % rewards.len()].clone(),
        }
    }

    /// Per-action observation noise for one step; drawn for every action so
    /// the stream does not depend on the policy.
    fn noise(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            BanditEnv::SyntheticLinear { weights, noise_std, .. } => {
                (0..weights.len()).map(|_| noise_std * rng.normal()).collect()
            }
            BanditEnv::SyntheticArgmax { weights } => vec![0.0; weights.len()],
            BanditEnv::Table { rewards, .. } => vec![0.0; rewards[0].len()],
        }
    }
}

/// Sample one particle uniformly and take the argmax of its predicted
/// per-action reward.
pub fn thompson_step(
    ens: &ParticleEnsemble,
    context: &[f64],
    rng: &mut Rng,
) -> Result<usize, ModelError> {
    let i = rng.below(ens.len());
    let pred = models::forward(&ens.spec, ens.particle(i), context)?;
    let mut best = 0;
    for (a, v) in pred.iter().enumerate() {
        if *v > pred[best] {
            best = a;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy)]
pub struct RegretStep {
    pub action: usize,
    pub reward: f64,
    pub optimal_expected: f64,
    pub cumulative_regret: f64,
    pub uniform_cumulative_regret: f64,
    /// Agent cumulative pseudo-regret over the uniform baseline's.
    pub relative_to_uniform: f64,
}

#[derive(Debug, Clone)]
pub struct RegretTrace {
    pub steps: Vec<RegretStep>,
}

impl RegretTrace {
    pub fn final_relative(&self) -> f64 {
        self.steps.last().map_or(1.0, |s| s.relative_to_uniform)
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative_regret)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "step,action,reward,optimal_expected,cumulative_regret,uniform_cumulative_regret,relative_to_uniform"
        )?;
        for (t, s) in self.steps.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                t,
                s.action,
                s.reward,
                s.optimal_expected,
                s.cumulative_regret,
                s.uniform_cumulative_regret,
                s.relative_to_uniform
            )?;
        }
        Ok(())
    }
}

/// Gaussian log-likelihood of a reward on the chosen head only.
fn masked_loglik(
    spec: &ModelSpec,
    params: &[f64],
    ctx: &[f64],
    action: usize,
    reward: f64,
    sigma: f64,
) -> Result<f64, ModelError> {
    let f = models::forward(spec, params, ctx)?;
    let r = reward - f[action];
    Ok(-0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - r * r / (2.0 * sigma * sigma))
}

/// Gradient of [`masked_loglik`] via the output-space pullback.
fn masked_grad(
    spec: &ModelSpec,
    params: &[f64],
    ctx: &[f64],
    action: usize,
    reward: f64,
    sigma: f64,
) -> Result<ParamVector, ModelError> {
    let dummy = vec![0.0; spec.output_dim];
    let og = models::grad_output(spec, params, ctx, &dummy)?;
    let mut cot = vec![0.0; spec.output_dim];
    cot[action] = (reward - og.output[action]) / (sigma * sigma);
    Ok(og.pullback(spec, params, &cot))
}

/// Retrain the reward ensemble on the replay buffer with the configured
/// rule (plain log-joint ascent or the variance-regularized objective).
pub fn retrain(
    rule: &UpdateRule,
    ens: &ParticleEnsemble,
    buffer: &[(Vec<f64>, usize, f64)],
    prior: &Prior,
    steps: usize,
    sigma: f64,
) -> Result<ParticleEnsemble, TrainError> {
    let n = ens.len();
    let nf = n as f64;
    let mut particles: Vec<ParamVector> = ens.particles().to_vec();
    let (b1, b2, eps) = match rule.optimizer {
        Optimizer::AdaptiveMoment { beta1, beta2, epsilon } => (beta1, beta2, epsilon),
        Optimizer::Plain => (0.9, 0.999, 1e-8),
    };
    let mut adam: Vec<(Vec<f64>, Vec<f64>, u64)> =
        particles.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()], 0)).collect();

    for step in 0..steps {
        let spec = &ens.spec;
        // per-datum loss columns
        let mut coeff = vec![vec![0.0; buffer.len()]; n];
        match rule.kind {
            RuleKind::Var | RuleKind::VarSvgd => {
                for (d, (ctx, a, r)) in buffer.iter().enumerate() {
                    let col: Vec<f64> = particles
                        .iter()
                        .map(|p| masked_loglik(spec, p, ctx, *a, *r, sigma))
                        .collect::<Result<_, _>>()?;
                    let (_, dr) = updates::repulsion_value_and_loss_grad(rule.bandwidth, &col);
                    for i in 0..n {
                        coeff[i][d] = 1.0 / nf + dr[i];
                    }
                }
            }
            _ => {
                // plain per-particle log-joint ascent
                for row in coeff.iter_mut() {
                    for c in row.iter_mut() {
                        *c = 1.0;
                    }
                }
            }
        }
        let kl_scale = match rule.kind {
            RuleKind::Var | RuleKind::VarSvgd => 1.0 / nf,
            _ => 1.0,
        };
        let mut dirs: Vec<ParamVector> = Vec::with_capacity(n);
        for (i, p) in particles.iter().enumerate() {
            let mut g: Vec<f64> =
                models::grad_log_prior(prior, p).iter().map(|v| kl_scale * v).collect();
            for (d, (ctx, a, r)) in buffer.iter().enumerate() {
                let gl = masked_grad(spec, p, ctx, *a, *r, sigma)?;
                for (acc, v) in g.iter_mut().zip(&gl) {
                    *acc += coeff[i][d] * v;
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged { step });
            }
            dirs.push(g);
        }
        for ((p, dir), (m, v, t)) in particles.iter_mut().zip(&dirs).zip(adam.iter_mut()) {
            *t += 1;
            let bc1 = 1.0 - b1.powi(*t as i32);
            let bc2 = 1.0 - b2.powi(*t as i32);
            for ((pc, g), (mc, vc)) in
                p.iter_mut().zip(dir.iter().map(|x| -x)).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mc = b1 * *mc + (1.0 - b1) * g;
                *vc = b2 * *vc + (1.0 - b2) * g * g;
                *pc -= rule.step_size * (*mc / bc1) / ((*vc / bc2).sqrt() + eps);
            }
        }
    }
    Ok(ens.with_particles(particles))
}

/// Interleave Thompson action selection, reward observation, buffer growth,
/// and periodic retraining; the uniform baseline consumes the identical
/// context and noise stream.
#[allow(clippy::too_many_arguments)]
pub fn bandit_loop(
    rule: &UpdateRule,
    env: &BanditEnv,
    horizon: usize,
    retrain_every: usize,
    retrain_steps: usize,
    initial: ParticleEnsemble,
    prior: &Prior,
    reward_sigma: f64,
    rng: &mut Rng,
) -> Result<RegretTrace, TrainError> {
    assert!(horizon >= 1);
    assert_eq!(initial.spec.output_dim, env.num_actions());
    let mut env_rng = rng.split();
    let mut agent_rng = rng.split();
    let mut uniform_rng = rng.split();

    let mut ens = initial;
    let mut buffer: Vec<(Vec<f64>, usize, f64)> = Vec::with_capacity(horizon);
    let mut cum = 0.0;
    let mut ucum = 0.0;
    let mut steps = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let ctx = env.context(t, &mut env_rng);
        let expected = env.expected_rewards(t, &ctx);
        let noise = env.noise(&mut env_rng);
        let best = expected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        let a = thompson_step(&ens, &ctx, &mut agent_rng)?;
        let reward = expected[a] + noise[a];
        cum += best - expected[a];

        let u = uniform_rng.below(env.num_actions());
        ucum += best - expected[u];

        buffer.push((ctx, a, reward));
        let relative = if ucum > 0.0 { cum / ucum } else { 1.0 };
        steps.push(RegretStep {
            action: a,
            reward,
            optimal_expected: best,
            cumulative_regret: cum,
            uniform_cumulative_regret: ucum,
            relative_to_uniform: relative,
        });

        if (t + 1) % retrain_every == 0 {
            ens = retrain(rule, &ens, &buffer, prior, retrain_steps, reward_sigma)?;
        }
    }
    Ok(RegretTrace { steps })
}

/// Multi-head reward model for a bandit environment.
pub fn reward_model_spec(env: &BanditEnv, hidden: &[usize], sigma: f64) -> ModelSpec {
    ModelSpec {
        input_dim: env.context_dim(),
        hidden: hidden.to_vec(),
        output_dim: env.num_actions(),
        activation: crate::models::Activation::Relu,
        likelihood: crate::models::Likelihood::Gaussian { sigma, learnable: false },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_env(seed: u64) -> BanditEnv {
        BanditEnv::synthetic_linear(3, 2, 0.1, &mut Rng::new(seed))
    }

    #[test]
    fn perfect_reward_model_has_zero_regret() {
        let env = linear_env(4);
        let weights = match &env {
            BanditEnv::SyntheticLinear { weights, .. } => weights.clone(),
            _ => unreachable!(),
        };
        // single linear particle whose heads reproduce the true weights
        let spec = reward_model_spec(&env, &[], 0.5);
        let mut params = Vec::new();
        for w in &weights {
            params.extend_from_slice(w);
        }
        params.extend(vec![0.0; 3]); // biases
        let ens = ParticleEnsemble::new(spec, vec![params]);
        let rule = UpdateRule::new(RuleKind::Map, 0.01);
        let mut rng = Rng::new(9);
        // never retrain: horizon below the retrain interval keeps the oracle intact
        let trace =
            bandit_loop(&rule, &env, 40, 1000, 0, ens, &Prior::unit(), 0.5, &mut rng).unwrap();
        assert_eq!(trace.cumulative_regret(), 0.0);
    }

    #[test]
    fn regret_is_nondecreasing_and_relative_consistent() {
        let env = linear_env(5);
        let spec = reward_model_spec(&env, &[8], 0.5);
        let mut rng = Rng::new(3);
        let ens = ParticleEnsemble::init(spec, 4, &mut rng);
        let rule = UpdateRule::new(RuleKind::Var, 0.02);
        let trace =
            bandit_loop(&rule, &env, 120, 40, 20, ens, &Prior::unit(), 0.5, &mut rng).unwrap();
        let mut prev = 0.0;
        let mut uprev = 0.0;
        for s in &trace.steps {
            assert!(s.cumulative_regret >= prev - 1e-12);
            assert!(s.uniform_cumulative_regret >= uprev - 1e-12);
            prev = s.cumulative_regret;
            uprev = s.uniform_cumulative_regret;
            if s.uniform_cumulative_regret > 0.0 {
                let expect = s.cumulative_regret / s.uniform_cumulative_regret;
                assert!((s.relative_to_uniform - expect).abs() < 1e-12);
            } else {
                assert_eq!(s.relative_to_uniform, 1.0);
            }
        }
    }

    #[test]
    fn loops_are_deterministic_given_seed() {
        let env = linear_env(6);
        let spec = reward_model_spec(&env, &[8], 0.5);
        let run = |seed: u64| {
            let mut rng = Rng::new(seed);
            let mut init_rng = Rng::new(seed ^ 0xabc);
            let ens = ParticleEnsemble::init(spec.clone(), 3, &mut init_rng);
            let rule = UpdateRule::new(RuleKind::Var, 0.02);
            bandit_loop(&rule, &env, 60, 30, 10, ens, &Prior::unit(), 0.5, &mut rng).unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.action, y.action);
            assert_eq!(x.reward, y.reward);
            assert_eq!(x.relative_to_uniform, y.relative_to_uniform);
        }
    }

    #[test]
    fn csv_env_roundtrip() {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "c1,c2,r0,r1").unwrap();
        writeln!(f, "0.1,0.2,1.0,0.0").unwrap();
        writeln!(f, "0.3,-0.4,0.0,2.0").unwrap();
        let env = BanditEnv::from_csv(f.path(), 2).unwrap();
        assert_eq!(env.num_actions(), 2);
        assert_eq!(env.context_dim(), 2);
        let mut rng = Rng::new(1);
        assert_eq!(env.context(0, &mut rng), vec![0.1, 0.2]);
        assert_eq!(env.expected_rewards(1, &[0.0, 0.0]), vec![0.0, 2.0]);
        assert_eq!(env.noise(&mut rng), vec![0.0, 0.0]);
    }

    #[test]
    fn trace_csv_has_header() {
        let trace = RegretTrace {
            steps: vec![RegretStep {
                action: 1,
                reward: 0.5,
                optimal_expected: 1.0,
                cumulative_regret: 0.5,
                uniform_cumulative_regret: 1.0,
                relative_to_uniform: 0.5,
            }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,action,reward,optimal_expected,cumulative_regret"));
    }
}
