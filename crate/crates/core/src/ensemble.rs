//! The empirical distribution over particles, the model-averaged predictive,
//! and log-likelihood bookkeeping.

use crate::harness::data::Dataset;
use crate::models::{self, Likelihood, ModelError, ModelSpec, ParamVector};
use crate::numerics::{logsumexp, Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metric does not apply to this likelihood family: {0}")]
    WrongLikelihoodFamily(&'static str),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint decode: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// N parameter vectors approximating the posterior as an empirical measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub spec: ModelSpec,
    particles: Vec<ParamVector>,
}

impl ParticleEnsemble {
    pub fn new(spec: ModelSpec, particles: Vec<ParamVector>) -> Self {
        assert!(!particles.is_empty(), "an ensemble needs at least one particle");
        for p in &particles {
            assert_eq!(p.len(), spec.param_count(), "particle does not match the spec");
        }
        ParticleEnsemble { spec, particles }
    }

    /// Draw `n` particles from the initialization distribution.
    pub fn init(spec: ModelSpec, n: usize, rng: &mut Rng) -> Self {
        let particles = (0..n).map(|_| spec.init_params(rng)).collect();
        ParticleEnsemble::new(spec, particles)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[ParamVector] {
        &self.particles
    }

    pub fn particle(&self, i: usize) -> &ParamVector {
        &self.particles[i]
    }

    /// Replace all particles, producing a new snapshot.
    pub fn with_particles(&self, particles: Vec<ParamVector>) -> Self {
        ParticleEnsemble::new(self.spec.clone(), particles)
    }
}

/// N×D matrix of per-particle, per-datum log-likelihoods.
#[derive(Debug, Clone)]
pub struct LogLikMatrix {
    pub values: Matrix,
}

impl LogLikMatrix {
    pub fn particles(&self) -> usize {
        self.values.rows()
    }

    pub fn data(&self) -> usize {
        self.values.cols()
    }

    /// The N log-likelihoods at datum `d`.
    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.values.rows()).map(|i| self.values.get(i, d)).collect()
    }
}

/// Entry-wise `ln p(x_d | θ_i)` over the whole dataset.
pub fn loglik_matrix(ens: &ParticleEnsemble, data: &Dataset) -> Result<LogLikMatrix, EnsembleError> {
    assert!(!data.is_empty(), "empty dataset");
    let mut m = Matrix::zeros(ens.len(), data.len());
    for (i, p) in ens.particles().iter().enumerate() {
        for d in 0..data.len() {
            let ll = models::log_lik(&ens.spec, p, data.input(d), data.target(d))?;
            m.set(i, d, ll);
        }
    }
    Ok(LogLikMatrix { values: m })
}

/// Model-averaged log predictive for one datum: `logsumexp(column) − ln N`.
pub fn bma_log_predictive(column: &[f64]) -> f64 {
    assert!(!column.is_empty());
    logsumexp(column) - (column.len() as f64).ln()
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub test_nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Averaged predictive mean per datum (regression only).
pub fn predictive_means(ens: &ParticleEnsemble, data: &Dataset) -> Result<Vec<f64>, EnsembleError> {
    if !matches!(ens.spec.likelihood, Likelihood::Gaussian { .. }) {
        return Err(EnsembleError::WrongLikelihoodFamily("rmse needs a gaussian model"));
    }
    let mut means = vec![0.0; data.len()];
    for p in ens.particles() {
        for d in 0..data.len() {
            let f = models::forward(&ens.spec, p, data.input(d))?;
            means[d] += f[0] / ens.len() as f64;
        }
    }
    Ok(means)
}

pub fn rmse(ens: &ParticleEnsemble, data: &Dataset) -> Result<f64, EnsembleError> {
    let means = predictive_means(ens, data)?;
    let mse = means
        .iter()
        .enumerate()
        .map(|(d, m)| {
            let r = data.target(d)[0] - m;
            r * r
        })
        .sum::<f64>()
        / data.len() as f64;
    Ok(mse.sqrt())
}

pub fn accuracy(ens: &ParticleEnsemble, data: &Dataset) -> Result<f64, EnsembleError> {
    let classes = match ens.spec.likelihood {
        Likelihood::Categorical { classes } => classes,
        _ => return Err(EnsembleError::WrongLikelihoodFamily("accuracy needs a categorical model")),
    };
    let mut hits = 0usize;
    for d in 0..data.len() {
        // average probabilities, not logits
        let mut probs = vec![0.0; classes];
        for p in ens.particles() {
            let logits = models::forward(&ens.spec, p, data.input(d))?;
            let lse = logsumexp(&logits);
            for (k, l) in logits.iter().enumerate() {
                probs[k] += (l - lse).exp() / ens.len() as f64;
            }
        }
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == data.target(d)[0] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Test NLL from the model-averaged predictive, plus the family-appropriate
/// fit metric.
pub fn metrics(ens: &ParticleEnsemble, data: &Dataset) -> Result<Metrics, EnsembleError> {
    let llm = loglik_matrix(ens, data)?;
    let nll = -(0..data.len())
        .map(|d| bma_log_predictive(&llm.column(d)))
        .sum::<f64>()
        / data.len() as f64;
    let (r, a) = match ens.spec.likelihood {
        Likelihood::Gaussian { .. } => (Some(rmse(ens, data)?), None),
        Likelihood::Categorical { .. } => (None, Some(accuracy(ens, data)?)),
    };
    Ok(Metrics { test_nll: nll, rmse: r, accuracy: a })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    spec: ModelSpec,
    particles: Vec<ParamVector>,
}

/// Versioned textual dump of the spec and all parameter vectors.
pub fn save_checkpoint<W: Write>(ens: &ParticleEnsemble, w: W) -> Result<(), EnsembleError> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        spec: ens.spec.clone(),
        particles: ens.particles.clone(),
    };
    serde_json::to_writer(w, &ck)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: R) -> Result<ParticleEnsemble, EnsembleError> {
    let ck: Checkpoint = serde_json::from_reader(r)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(EnsembleError::Version(ck.version));
    }
    Ok(ParticleEnsemble::new(ck.spec, ck.particles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::Dataset;
    use crate::models::ModelSpec;

    fn tiny_regression_data() -> Dataset {
        Dataset::from_parts(
            vec![vec![0.5], vec![-1.0], vec![2.0], vec![0.1]],
            vec![vec![0.2], vec![-0.4], vec![1.1], vec![0.0]],
        )
    }

    #[test]
    fn loglik_matrix_matches_per_cell_oracle() {
        let spec = ModelSpec::regression(1, &[3], 0.5, false);
        let mut rng = Rng::new(41);
        let ens = ParticleEnsemble::init(spec.clone(), 3, &mut rng);
        let data = tiny_regression_data();
        let llm = loglik_matrix(&ens, &data).unwrap();
        for i in 0..3 {
            for d in 0..data.len() {
                let oracle =
                    models::log_lik(&spec, ens.particle(i), data.input(d), data.target(d)).unwrap();
                assert_eq!(llm.values.get(i, d), oracle);
            }
        }
    }

    #[test]
    fn identical_particles_give_identical_rows() {
        let spec = ModelSpec::regression(1, &[], 1.0, false);
        let ens = ParticleEnsemble::new(spec, vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let llm = loglik_matrix(&ens, &tiny_regression_data()).unwrap();
        for d in 0..llm.data() {
            assert_eq!(llm.values.get(0, d), llm.values.get(1, d));
        }
    }

    #[test]
    fn bma_constant_column_and_jensen_ordering() {
        assert!((bma_log_predictive(&[-1.3, -1.3, -1.3]) + 1.3).abs() < 1e-15);
        let direct = ((1.0f64 + (-2.0f64).exp()) / 2.0).ln();
        assert!((bma_log_predictive(&[0.0, -2.0]) - direct).abs() < 1e-15);
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let col: Vec<f64> = (0..3).map(|_| rng.uniform(-4.0, 0.0)).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            assert!(bma_log_predictive(&col) >= mean - 1e-12);
        }
    }

    #[test]
    fn bma_invariant_under_duplication() {
        let col = vec![-0.3, -2.7, -1.1];
        let doubled: Vec<f64> = col.iter().chain(col.iter()).cloned().collect();
        assert!((bma_log_predictive(&col) - bma_log_predictive(&doubled)).abs() < 1e-12);
    }

    #[test]
    fn metrics_on_perfect_fit() {
        // identity-ish model that reproduces targets exactly: y = x
        let spec = ModelSpec::regression(1, &[], 0.2, false);
        let ens = ParticleEnsemble::new(spec, vec![vec![1.0, 0.0]]);
        let data = Dataset::from_parts(vec![vec![0.3], vec![-0.8]], vec![vec![0.3], vec![-0.8]]);
        let m = metrics(&ens, &data).unwrap();
        assert!(m.rmse.unwrap() < 1e-12);
        let expect = 0.5 * (2.0 * std::f64::consts::PI * 0.04).ln();
        assert!((m.test_nll - expect).abs() < 1e-12);
    }

    #[test]
    fn single_particle_nll_collapses_to_average() {
        let spec = ModelSpec::regression(1, &[2], 0.7, false);
        let mut rng = Rng::new(5);
        let ens = ParticleEnsemble::init(spec.clone(), 1, &mut rng);
        let data = tiny_regression_data();
        let m = metrics(&ens, &data).unwrap();
        let avg = -(0..data.len())
            .map(|d| models::log_lik(&spec, ens.particle(0), data.input(d), data.target(d)).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        assert!((m.test_nll - avg).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force_mixture() {
        let spec = ModelSpec::regression(1, &[3], 0.4, false);
        let mut rng = Rng::new(77);
        let ens = ParticleEnsemble::init(spec.clone(), 3, &mut rng);
        let data = tiny_regression_data();
        let m = metrics(&ens, &data).unwrap();
        // explicit mixture density
        let mut nll = 0.0;
        for d in 0..data.len() {
            let mut mix = 0.0;
            for p in ens.particles() {
                let f = models::forward(&spec, p, data.input(d)).unwrap()[0];
                let r = data.target(d)[0] - f;
                mix += (1.0 / 3.0)
                    * (-r * r / (2.0 * 0.16)).exp()
                    / (2.0 * std::f64::consts::PI * 0.16).sqrt();
            }
            nll -= mix.ln() / data.len() as f64;
        }
        assert!((m.test_nll - nll).abs() < 1e-10);
    }

    #[test]
    fn metrics_invariant_under_particle_reordering() {
        let spec = ModelSpec::regression(1, &[3], 0.4, false);
        let mut rng = Rng::new(13);
        let ens = ParticleEnsemble::init(spec.clone(), 4, &mut rng);
        let data = tiny_regression_data();
        let m1 = metrics(&ens, &data).unwrap();
        let mut reordered = ens.particles().to_vec();
        reordered.reverse();
        let m2 = metrics(&ens.with_particles(reordered), &data).unwrap();
        assert!((m1.test_nll - m2.test_nll).abs() < 1e-12);
        assert!((m1.rmse.unwrap() - m2.rmse.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wrong_family_is_rejected() {
        let spec = ModelSpec::classification(1, &[], 2);
        let mut rng = Rng::new(1);
        let ens = ParticleEnsemble::init(spec, 2, &mut rng);
        let data = Dataset::from_parts(vec![vec![0.0]], vec![vec![1.0]]);
        assert!(matches!(rmse(&ens, &data), Err(EnsembleError::WrongLikelihoodFamily(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = ModelSpec::regression(2, &[3], 0.2, true);
        let mut rng = Rng::new(3);
        let ens = ParticleEnsemble::init(spec, 2, &mut rng);
        let mut buf = Vec::new();
        save_checkpoint(&ens, &mut buf).unwrap();
        let back = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.spec, ens.spec);
        assert_eq!(back.particles(), ens.particles());
    }
}
