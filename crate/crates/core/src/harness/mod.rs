//! Data generation and ingestion, experiment drivers, the contextual-bandit
//! simulator, the property-verification suites, and the CLI configuration
//! format.

pub mod bandit;
pub mod config;
pub mod data;
pub mod experiment;
pub mod verify;

pub use bandit::{bandit_loop, thompson_step, BanditEnv, RegretTrace};
pub use config::Config;
pub use data::{load_csv_regression, synthetic_regression, toy_regression, Dataset};
pub use experiment::{run_regression_experiment, ExperimentOutcome, IntervalRow};
pub use verify::{run_suite, Suite, SuiteReport};
