//! Particle-ensemble variational inference with loss-space repulsion.
//!
//! The crate is organized around a few layers:
//!
//! * [`numerics`] — dense symmetric linear algebra, stable reductions, and a
//!   seedable counter-based random number generator.
//! * [`models`] — feed-forward models `p(x | θ)`, Gaussian priors, and exact
//!   reverse-mode gradients of log-likelihood and log-prior.
//! * [`ensemble`] — the empirical distribution over particles, the
//!   model-averaged predictive, and log-likelihood bookkeeping.
//! * [`jensen`] — per-datum bandwidths, repulsion terms, Gram matrices, and
//!   the inequality chains that relate the mean log-likelihood to the
//!   model-averaged log-predictive.
//! * [`updates`] — objectives and particle update rules (MAP, SVGD, w-SGLD,
//!   GFSD, GFSF, their function-space variants, DPP and predictive-variance
//!   baselines, and the variance-regularized objective with exact gradients).
//! * [`pacbayes`] — assembly of empirical PAC-Bayes bound reports.
//! * [`harness`] — data generation and ingestion, experiment drivers, the
//!   contextual-bandit simulator, the property-verification suites, and the
//!   configuration format used by the CLI.

pub mod ensemble;
pub mod harness;
pub mod jensen;
pub mod models;
pub mod numerics;
pub mod pacbayes;
pub mod updates;

pub use ensemble::{LogLikMatrix, Metrics, ParticleEnsemble};
pub use jensen::{BandwidthKind, ColumnDiagnostics, RepulsionReport};
pub use models::{Activation, Likelihood, ModelSpec, ParamVector, Prior};
pub use numerics::{Matrix, Rng};
pub use pacbayes::{BoundConfig, BoundReport, BoundVariant};
pub use updates::{KernelBandwidth, Optimizer, RuleKind, StepReport, UpdateRule};
