//! Declarative experiment configuration (TOML, versioned).
//!
//! Every run is described by one file with nested sections for the model,
//! prior, update rule, training loop, data source, bound constants, and the
//! bandit simulator. Missing keys take the defaults below.

use crate::jensen::BandwidthKind;
use crate::models::{Activation, Likelihood, ModelSpec, Prior};
use crate::pacbayes::BoundConfig;
use crate::updates::{KernelBandwidth, Optimizer, RuleKind, UpdateRule};
use serde::Deserialize;
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config read: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported config version {0}")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub update: UpdateSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub bound: BoundSection,
    #[serde(default)]
    pub bandit: BanditSection,
}

mod defaults {
    pub fn seed() -> u64 {
        0
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: Option<usize>,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_activation")]
    pub activation: String,
    #[serde(default = "d_likelihood")]
    pub likelihood: String,
    /// Observation noise; fixed value or initial value when learnable.
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub sigma_learnable: bool,
    #[serde(default = "d_classes")]
    pub classes: usize,
}

fn d_hidden() -> Vec<usize> {
    vec![50]
}
fn d_activation() -> String {
    "relu".into()
}
fn d_likelihood() -> String {
    "gaussian".into()
}
fn d_sigma() -> f64 {
    0.2
}
fn d_classes() -> usize {
    2
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_dim: None,
            hidden: d_hidden(),
            activation: d_activation(),
            likelihood: d_likelihood(),
            sigma: d_sigma(),
            sigma_learnable: false,
            classes: d_classes(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "d_variance")]
    pub variance: f64,
}

fn d_variance() -> f64 {
    1.0
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { mean: 0.0, variance: d_variance() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSection {
    #[serde(default = "d_rule")]
    pub rule: String,
    /// Loss bandwidth for the variance-regularized rules: h | hm | h_median | hw.
    #[serde(default = "d_bandwidth")]
    pub bandwidth: String,
    /// "median_trick" or a fixed squared bandwidth.
    #[serde(default = "d_kernel")]
    pub kernel: String,
    #[serde(default)]
    pub kernel_h2: Option<f64>,
    #[serde(default = "d_step")]
    pub step_size: f64,
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps_opt")]
    pub epsilon_opt: f64,
}

fn d_rule() -> String {
    "var".into()
}
fn d_bandwidth() -> String {
    "h".into()
}
fn d_kernel() -> String {
    "median_trick".into()
}
fn d_step() -> f64 {
    0.004
}
fn d_optimizer() -> String {
    "adaptive_moment".into()
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps_opt() -> f64 {
    1e-8
}

impl Default for UpdateSection {
    fn default() -> Self {
        UpdateSection {
            rule: d_rule(),
            bandwidth: d_bandwidth(),
            kernel: d_kernel(),
            kernel_h2: None,
            step_size: d_step(),
            optimizer: d_optimizer(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            epsilon_opt: d_eps_opt(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_particles")]
    pub particles: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

fn d_particles() -> usize {
    20
}
fn d_epochs() -> usize {
    500
}
fn d_batch() -> usize {
    100
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { particles: d_particles(), epochs: d_epochs(), batch_size: d_batch() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// toy | synthetic | csv
    #[serde(default = "d_source")]
    pub source: String,
    pub path: Option<String>,
    #[serde(default = "d_target_column")]
    pub target_column: String,
    #[serde(default = "d_standardize")]
    pub standardize: bool,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "d_splits")]
    pub splits: usize,
    #[serde(default = "d_toy_points")]
    pub toy_points: usize,
    #[serde(default = "d_synth_points")]
    pub synthetic_points: usize,
    #[serde(default = "d_synth_dim")]
    pub synthetic_dim: usize,
}

fn d_source() -> String {
    "toy".into()
}
fn d_target_column() -> String {
    "y".into()
}
fn d_standardize() -> bool {
    true
}
fn d_test_fraction() -> f64 {
    0.1
}
fn d_splits() -> usize {
    1
}
fn d_toy_points() -> usize {
    20
}
fn d_synth_points() -> usize {
    200
}
fn d_synth_dim() -> usize {
    13
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: d_source(),
            path: None,
            target_column: d_target_column(),
            standardize: d_standardize(),
            test_fraction: d_test_fraction(),
            splits: d_splits(),
            toy_points: d_toy_points(),
            synthetic_points: d_synth_points(),
            synthetic_dim: d_synth_dim(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    #[serde(default = "d_xi")]
    pub xi: f64,
    #[serde(default = "d_c")]
    pub c: f64,
    #[serde(default)]
    pub psi_constant: f64,
}

fn d_xi() -> f64 {
    0.05
}
fn d_c() -> f64 {
    1.0
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection { xi: d_xi(), c: d_c(), psi_constant: 0.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditSection {
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_actions")]
    pub actions: usize,
    #[serde(default = "d_context_dim")]
    pub context_dim: usize,
    #[serde(default = "d_reward_noise")]
    pub reward_noise: f64,
    #[serde(default = "d_retrain_every")]
    pub retrain_every: usize,
    #[serde(default = "d_retrain_steps")]
    pub retrain_steps: usize,
    #[serde(default = "d_bandit_particles")]
    pub particles: usize,
    #[serde(default = "d_bandit_sigma")]
    pub reward_sigma: f64,
}

fn d_horizon() -> usize {
    400
}
fn d_actions() -> usize {
    4
}
fn d_context_dim() -> usize {
    4
}
fn d_reward_noise() -> f64 {
    0.5
}
fn d_retrain_every() -> usize {
    50
}
fn d_retrain_steps() -> usize {
    100
}
fn d_bandit_particles() -> usize {
    10
}
fn d_bandit_sigma() -> f64 {
    0.5
}

impl Default for BanditSection {
    fn default() -> Self {
        BanditSection {
            horizon: d_horizon(),
            actions: d_actions(),
            context_dim: d_context_dim(),
            reward_noise: d_reward_noise(),
            retrain_every: d_retrain_every(),
            retrain_steps: d_retrain_steps(),
            particles: d_bandit_particles(),
            reward_sigma: d_bandit_sigma(),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelSection::default(),
            prior: PriorSection::default(),
            update: UpdateSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            bound: BoundSection::default(),
            bandit: BanditSection::default(),
        }
    }
}

impl Config {
    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version(cfg.version));
        }
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Config, ConfigError> {
        Config::from_str(&std::fs::read_to_string(path)?)
    }

    /// Resolve the model section against a known input dimensionality.
    pub fn model_spec(&self, input_dim: usize) -> Result<ModelSpec, ConfigError> {
        let activation = match self.model.activation.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            other => return Err(ConfigError::Invalid(format!("unknown activation {other:?}"))),
        };
        let (likelihood, output_dim) = match self.model.likelihood.as_str() {
            "gaussian" => {
                if self.model.sigma <= 0.0 {
                    return Err(ConfigError::Invalid("sigma must be positive".into()));
                }
                (
                    Likelihood::Gaussian {
                        sigma: self.model.sigma,
                        learnable: self.model.sigma_learnable,
                    },
                    1,
                )
            }
            "categorical" => {
                (Likelihood::Categorical { classes: self.model.classes }, self.model.classes)
            }
            other => return Err(ConfigError::Invalid(format!("unknown likelihood {other:?}"))),
        };
        Ok(ModelSpec {
            input_dim: self.model.input_dim.unwrap_or(input_dim),
            hidden: self.model.hidden.clone(),
            output_dim,
            activation,
            likelihood,
        })
    }

    pub fn prior(&self) -> Result<Prior, ConfigError> {
        if self.prior.variance <= 0.0 {
            return Err(ConfigError::Invalid("prior variance must be positive".into()));
        }
        Ok(Prior::new(self.prior.mean, self.prior.variance))
    }

    pub fn update_rule(&self) -> Result<UpdateRule, ConfigError> {
        let kind = RuleKind::parse(&self.update.rule)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown rule {:?}", self.update.rule)))?;
        let bandwidth = match self.update.bandwidth.as_str() {
            "h" => BandwidthKind::H,
            "hm" | "h_m" => BandwidthKind::Hm,
            "h_median" | "median" => BandwidthKind::HMedian,
            "hw" | "h_w" => BandwidthKind::Hw,
            other => return Err(ConfigError::Invalid(format!("unknown bandwidth {other:?}"))),
        };
        let kernel_bandwidth = match self.update.kernel.as_str() {
            "median_trick" | "median" => KernelBandwidth::MedianTrick,
            "fixed" => KernelBandwidth::Fixed(self.update.kernel_h2.ok_or_else(|| {
                ConfigError::Invalid("kernel = \"fixed\" requires kernel_h2".into())
            })?),
            other => return Err(ConfigError::Invalid(format!("unknown kernel policy {other:?}"))),
        };
        let optimizer = match self.update.optimizer.as_str() {
            "plain" => Optimizer::Plain,
            "adaptive_moment" | "adam" => Optimizer::AdaptiveMoment {
                beta1: self.update.beta1,
                beta2: self.update.beta2,
                epsilon: self.update.epsilon_opt,
            },
            other => return Err(ConfigError::Invalid(format!("unknown optimizer {other:?}"))),
        };
        if self.update.step_size <= 0.0 {
            return Err(ConfigError::Invalid("step_size must be positive".into()));
        }
        Ok(UpdateRule {
            kind,
            bandwidth,
            kernel_bandwidth,
            step_size: self.update.step_size,
            optimizer,
        })
    }

    pub fn bound_config(&self) -> BoundConfig {
        BoundConfig { xi: self.bound.xi, c: self.bound.c, psi_constant: self.bound.psi_constant }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = Config::from_str("").unwrap();
        assert_eq!(cfg.version, CONFIG_VERSION);
        let rule = cfg.update_rule().unwrap();
        assert_eq!(rule.kind, RuleKind::Var);
        assert!(matches!(rule.optimizer, Optimizer::AdaptiveMoment { .. }));
        let spec = cfg.model_spec(3).unwrap();
        assert_eq!(spec.input_dim, 3);
        assert_eq!(spec.hidden, vec![50]);
    }

    #[test]
    fn full_document_parses() {
        let text = r#"
            version = 1
            seed = 7
            [model]
            hidden = [32, 32]
            activation = "tanh"
            likelihood = "categorical"
            classes = 3
            [prior]
            variance = 2.0
            [update]
            rule = "f_svgd"
            kernel = "fixed"
            kernel_h2 = 0.5
            step_size = 0.01
            optimizer = "plain"
            [train]
            particles = 5
            epochs = 10
            batch_size = 4
            [bound]
            xi = 0.1
        "#;
        let cfg = Config::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        let spec = cfg.model_spec(4).unwrap();
        assert_eq!(spec.output_dim, 3);
        let rule = cfg.update_rule().unwrap();
        assert_eq!(rule.kind, RuleKind::FSvgd);
        assert_eq!(rule.kernel_bandwidth, KernelBandwidth::Fixed(0.5));
        assert_eq!(cfg.bound_config().xi, 0.1);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(Config::from_str("version = 9").is_err());
        let cfg = Config::from_str("[update]\nrule = \"nope\"").unwrap();
        assert!(cfg.update_rule().is_err());
        let cfg = Config::from_str("[update]\nkernel = \"fixed\"").unwrap();
        assert!(cfg.update_rule().is_err());
        assert!(Config::from_str("[extra]\nx = 1").is_err());
    }
}
