//! Regression experiment drivers: repeated-split training, metric
//! aggregation, bound reports, per-datum repulsion diagnostics, and the
//! credible-interval grid for one-dimensional inputs.

use crate::ensemble::{self, Metrics, ParticleEnsemble};
use crate::harness::config::{Config, ConfigError};
use crate::harness::data::{self, DataError, Dataset};
use crate::jensen::{BandwidthKind, JensenError, RepulsionReport};
use crate::models::Likelihood;
use crate::numerics::Rng;
use crate::pacbayes::{self, BoundReport, BoundVariant};
use crate::updates::{self, StepReport, TrainError};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ensemble(#[from] ensemble::EnsembleError),
    #[error(transparent)]
    Jensen(#[from] JensenError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One row of the plot-ready credible-interval table.
#[derive(Debug, Clone, Copy)]
pub struct IntervalRow {
    pub x: f64,
    pub predictive_mean: f64,
    /// 2.5 / 97.5 percentiles of the sampled predictive mixture.
    pub pred_lo: f64,
    pub pred_hi: f64,
    /// 2.5 / 97.5 percentiles of the per-particle means, clipped into the
    /// predictive band so the epistemic interval always nests inside it.
    pub mean_lo: f64,
    pub mean_hi: f64,
}

impl IntervalRow {
    pub fn predictive_width(&self) -> f64 {
        self.pred_hi - self.pred_lo
    }

    pub fn mean_width(&self) -> f64 {
        self.mean_hi - self.mean_lo
    }
}

/// Linear-interpolation percentile of a sorted copy of `values`.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    values[lo] * (1.0 - w) + values[hi] * w
}

/// Draws per particle when sampling the predictive mixture.
pub const PREDICTIVE_DRAWS_PER_PARTICLE: usize = 200;

/// Credible-interval grid over `[lo, hi]` for a one-dimensional regression
/// ensemble. Deterministic given the generator.
pub fn interval_grid(
    ens: &ParticleEnsemble,
    lo: f64,
    hi: f64,
    points: usize,
    rng: &mut Rng,
) -> Result<Vec<IntervalRow>, ExperimentError> {
    assert_eq!(ens.spec.input_dim, 1, "interval grids need 1-d inputs");
    assert!(matches!(ens.spec.likelihood, Likelihood::Gaussian { .. }));
    let mut rows = Vec::with_capacity(points);
    for k in 0..points {
        let x = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        let mut means = Vec::with_capacity(ens.len());
        let mut draws = Vec::with_capacity(ens.len() * PREDICTIVE_DRAWS_PER_PARTICLE);
        for p in ens.particles() {
            let f = crate::models::forward(&ens.spec, p, &[x])
                .map_err(TrainError::Model)?[0];
            let sigma = ens.spec.sigma(p);
            means.push(f);
            for _ in 0..PREDICTIVE_DRAWS_PER_PARTICLE {
                draws.push(f + sigma * rng.normal());
            }
        }
        let pred_lo = percentile(&mut draws, 0.025);
        let pred_hi = percentile(&mut draws.clone(), 0.975);
        let mean_lo = percentile(&mut means.clone(), 0.025).max(pred_lo);
        let mean_hi = percentile(&mut means, 0.975).min(pred_hi);
        let predictive_mean = {
            let mut s = 0.0;
            for p in ens.particles() {
                s += crate::models::forward(&ens.spec, p, &[x]).map_err(TrainError::Model)?[0];
            }
            s / ens.len() as f64
        };
        rows.push(IntervalRow { x, predictive_mean, pred_lo, pred_hi, mean_lo, mean_hi });
    }
    Ok(rows)
}

pub fn write_interval_csv<W: Write>(rows: &[IntervalRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x,predictive_mean,pred_lo,pred_hi,mean_lo,mean_hi")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.x, r.predictive_mean, r.pred_lo, r.pred_hi, r.mean_lo, r.mean_hi
        )?;
    }
    Ok(())
}

pub fn write_trajectory_csv<W: Write>(traj: &[StepReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,objective,mean_grad_norm,mean_repulsion")?;
    for (i, s) in traj.iter().enumerate() {
        let n = s.grad_norms.len().max(1) as f64;
        writeln!(
            w,
            "{},{},{},{}",
            i,
            s.objective_value,
            s.grad_norms.iter().sum::<f64>() / n,
            s.repulsion_magnitudes.iter().sum::<f64>() / n
        )?;
    }
    Ok(())
}

/// Per-split and aggregate results of a regression run.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub split_metrics: Vec<Metrics>,
    /// RMSE / NLL in the original target units (unstandardized).
    pub mean_rmse: f64,
    pub mean_nll: f64,
    pub repulsion: RepulsionReport,
    pub bounds: Vec<BoundReport>,
    pub interval_grid: Option<Vec<IntervalRow>>,
    pub trajectory: Vec<StepReport>,
    pub final_ensemble: ParticleEnsemble,
}

fn load_source(cfg: &Config, rng: &mut Rng) -> Result<Dataset, ExperimentError> {
    Ok(match cfg.data.source.as_str() {
        "toy" => data::toy_regression(rng, cfg.data.toy_points),
        "synthetic" => {
            data::synthetic_regression(rng, cfg.data.synthetic_points, cfg.data.synthetic_dim)
        }
        "csv" => {
            let path = cfg.data.path.as_ref().ok_or_else(|| {
                ConfigError::Invalid("data.source = \"csv\" requires data.path".into())
            })?;
            data::load_csv_regression(Path::new(path), &cfg.data.target_column, false)?
        }
        other => {
            return Err(ConfigError::Invalid(format!("unknown data source {other:?}")).into())
        }
    })
}

/// Train/evaluate over the configured number of splits, reporting metrics in
/// original units, the final split's diagnostics, bound reports, and — for
/// one-dimensional inputs — the interval grid.
pub fn run_regression_experiment(
    cfg: &Config,
    seed: u64,
) -> Result<ExperimentOutcome, ExperimentError> {
    let mut rng = Rng::new(seed);
    let full = load_source(cfg, &mut rng)?;
    let prior = cfg.prior()?;
    let rule = cfg.update_rule()?;
    let spec = cfg.model_spec(full.input_dim())?;

    let toy_like = cfg.data.source == "toy";
    let splits = cfg.data.splits.max(1);
    let mut split_metrics = Vec::with_capacity(splits);
    let mut rmses = Vec::with_capacity(splits);
    let mut nlls = Vec::with_capacity(splits);
    let mut last: Option<(ParticleEnsemble, Dataset, Vec<StepReport>)> = None;

    for _split in 0..splits {
        let (train_raw, test_raw) = if toy_like {
            // the toy protocol trains and reports on the same small draw
            (full.clone(), full.clone())
        } else {
            full.split(cfg.data.test_fraction, &mut rng)
        };
        let (train_set, test_set) = if cfg.data.standardize && !toy_like {
            Dataset::standardize_pair(&train_raw, &test_raw)
        } else {
            (train_raw, test_raw)
        };
        let ens = ParticleEnsemble::init(spec.clone(), cfg.train.particles, &mut rng);
        let (trained, traj) = updates::train(
            &rule,
            &ens,
            &train_set,
            &prior,
            cfg.train.epochs,
            cfg.train.batch_size,
            &mut rng,
        )?;
        let m = ensemble::metrics(&trained, &test_set)?;
        let (rmse_orig, nll_orig) = match &test_set.normalization {
            Some(norm) => (
                m.rmse.unwrap_or(f64::NAN) * norm.target_scale,
                m.test_nll + norm.target_scale.ln(),
            ),
            None => (m.rmse.unwrap_or(f64::NAN), m.test_nll),
        };
        rmses.push(rmse_orig);
        nlls.push(nll_orig);
        split_metrics.push(m);
        last = Some((trained, train_set, traj));
    }

    let (final_ensemble, train_set, trajectory) = last.expect("at least one split");
    let llm = ensemble::loglik_matrix(&final_ensemble, &train_set)?;
    let repulsion = RepulsionReport::from_loglik_matrix(&llm, 1.0)?;
    let bcfg = cfg.bound_config();
    let bounds = vec![
        pacbayes::bound_theorem1(&final_ensemble, &train_set, &prior, &bcfg)?,
        pacbayes::bound_theorem4(&final_ensemble, &train_set, &prior, &bcfg, BandwidthKind::Hm)?,
        pacbayes::bound_ensemble(BoundVariant::EnsembleRc, &final_ensemble, &train_set, &prior, &bcfg)?,
        pacbayes::bound_ensemble(BoundVariant::EnsembleRw, &final_ensemble, &train_set, &prior, &bcfg)?,
        pacbayes::bound_ensemble(BoundVariant::EnsembleRg, &final_ensemble, &train_set, &prior, &bcfg)?,
        pacbayes::bound_ensemble(BoundVariant::EnsembleRd, &final_ensemble, &train_set, &prior, &bcfg)?,
    ];

    let interval = if final_ensemble.spec.input_dim == 1
        && matches!(final_ensemble.spec.likelihood, Likelihood::Gaussian { .. })
    {
        let (lo, hi) = if toy_like {
            (-0.5, 1.5)
        } else {
            let xs: Vec<f64> = train_set.inputs().iter().map(|r| r[0]).collect();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-6);
            (lo - 0.5 * span, hi + 0.5 * span)
        };
        Some(interval_grid(&final_ensemble, lo, hi, 201, &mut rng)?)
    } else {
        None
    };

    let n = rmses.len() as f64;
    Ok(ExperimentOutcome {
        split_metrics,
        mean_rmse: rmses.iter().sum::<f64>() / n,
        mean_nll: nlls.iter().sum::<f64>() / n,
        repulsion,
        bounds,
        interval_grid: interval,
        trajectory,
        final_ensemble,
    })
}
