//! Command-line driver: training, evaluation, diagnostics, bound reports,
//! contextual bandits, and the property-verification suites.
//!
//! Exit codes: 0 on success, 2 when a verification suite reports violations,
//! 1 on any other error.

use clap::{Args, Parser, Subcommand};
use pvi_core::ensemble::{self, ParticleEnsemble};
use pvi_core::harness::bandit::{bandit_loop, reward_model_spec, BanditEnv};
use pvi_core::harness::config::Config;
use pvi_core::harness::experiment::{
    run_regression_experiment, write_interval_csv, write_trajectory_csv,
};
use pvi_core::harness::verify::{run_suite, Suite};
use pvi_core::harness::{data, Dataset};
use pvi_core::jensen::RepulsionReport;
use pvi_core::numerics::Rng;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pvi", about = "Particle-ensemble inference toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the update rule from the configuration.
    #[arg(long)]
    rule: Option<String>,
    /// Overrides the particle count from the configuration.
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the configuration and write metrics, trajectory,
    /// diagnostics, bounds, checkpoint, and (for 1-d inputs) the interval grid.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Ensemble checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the contextual-bandit simulation and write the regret trace.
    Bandit(CommonArgs),
    /// Run property-verification suites; exits 2 on any violation.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// jensen | gradients | updates | identities | all
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
    },
    /// Emit the per-datum repulsion diagnostics CSV for a checkpoint (or a
    /// freshly initialized ensemble).
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on the bundled toy generator and emit the interval-grid CSV.
    Toy(CommonArgs),
}

fn load_config(common: &CommonArgs) -> Result<Config, Box<dyn std::error::Error>> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_path(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(rule) = &common.rule {
        cfg.update.rule = rule.clone();
    }
    if let Some(n) = common.particles {
        cfg.train.particles = n;
    }
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = File::create(dir.join(name))?;
    f.write_all(contents)
}

fn load_dataset(cfg: &Config, rng: &mut Rng) -> Result<Dataset, Box<dyn std::error::Error>> {
    Ok(match cfg.data.source.as_str() {
        "toy" => data::toy_regression(rng, cfg.data.toy_points),
        "synthetic" => {
            data::synthetic_regression(rng, cfg.data.synthetic_points, cfg.data.synthetic_dim)
        }
        "csv" => {
            let path = cfg.data.path.as_ref().ok_or("data.source = \"csv\" requires data.path")?;
            data::load_csv_regression(
                Path::new(path),
                &cfg.data.target_column,
                cfg.data.standardize,
            )?
        }
        other => return Err(format!("unknown data source {other:?}").into()),
    })
}

fn cmd_train(common: &CommonArgs) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(common)?;
    let outcome = run_regression_experiment(&cfg, cfg.seed)?;

    let mut metrics = serde_json::Map::new();
    metrics.insert("mean_rmse".into(), outcome.mean_rmse.into());
    metrics.insert("mean_nll".into(), outcome.mean_nll.into());
    metrics.insert("splits".into(), serde_json::to_value(&outcome.split_metrics)?);
    write_file(
        &common.out,
        "metrics.json",
        serde_json::to_string_pretty(&serde_json::Value::Object(metrics))?.as_bytes(),
    )?;

    let mut buf = Vec::new();
    write_trajectory_csv(&outcome.trajectory, &mut buf)?;
    write_file(&common.out, "trajectory.csv", &buf)?;

    let mut buf = Vec::new();
    outcome.repulsion.write_csv(&mut buf)?;
    write_file(&common.out, "repulsion.csv", &buf)?;

    write_file(
        &common.out,
        "bounds.json",
        serde_json::to_string_pretty(&outcome.bounds)?.as_bytes(),
    )?;

    let mut buf = Vec::new();
    ensemble::save_checkpoint(&outcome.final_ensemble, &mut buf)?;
    write_file(&common.out, "checkpoint.json", &buf)?;

    if let Some(grid) = &outcome.interval_grid {
        let mut buf = Vec::new();
        write_interval_csv(grid, &mut buf)?;
        write_file(&common.out, "intervals.csv", &buf)?;
    }
    println!(
        "train: mean rmse {:.4}, mean nll {:.4}, chains ok: {}",
        outcome.mean_rmse,
        outcome.mean_nll,
        outcome.repulsion.all_chains_ok()
    );
    Ok(())
}

fn cmd_eval(common: &CommonArgs, checkpoint: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(common)?;
    let ens = ensemble::load_checkpoint(File::open(checkpoint)?)?;
    let mut rng = Rng::new(cfg.seed);
    let dataset = load_dataset(&cfg, &mut rng)?;
    let m = ensemble::metrics(&ens, &dataset)?;
    let json = serde_json::to_string_pretty(&m)?;
    write_file(&common.out, "metrics.json", json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn cmd_bandit(common: &CommonArgs) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(common)?;
    let mut rng = Rng::new(cfg.seed);
    let mut env_seed_rng = rng.split();
    let env = match (cfg.data.source.as_str(), &cfg.data.path) {
        ("csv", Some(path)) => BanditEnv::from_csv(Path::new(path), cfg.bandit.actions)?,
        _ => BanditEnv::synthetic_linear(
            cfg.bandit.actions,
            cfg.bandit.context_dim,
            cfg.bandit.reward_noise,
            &mut env_seed_rng,
        ),
    };
    let spec = reward_model_spec(&env, &cfg.model.hidden, cfg.bandit.reward_sigma);
    let ens = ParticleEnsemble::init(spec, cfg.bandit.particles, &mut rng);
    let rule = cfg.update_rule()?;
    let prior = cfg.prior()?;
    let trace = bandit_loop(
        &rule,
        &env,
        cfg.bandit.horizon,
        cfg.bandit.retrain_every,
        cfg.bandit.retrain_steps,
        ens,
        &prior,
        cfg.bandit.reward_sigma,
        &mut rng,
    )?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    write_file(&common.out, "regret.csv", &buf)?;
    println!(
        "bandit: cumulative regret {:.4}, relative to uniform {:.4}",
        trace.cumulative_regret(),
        trace.final_relative()
    );
    Ok(())
}

fn cmd_verify(
    common: &CommonArgs,
    suite: &str,
    trials: u64,
) -> Result<bool, Box<dyn std::error::Error>> {
    let cfg = load_config(common)?;
    let suites: Vec<Suite> = if suite == "all" {
        Suite::all().to_vec()
    } else {
        vec![Suite::parse(suite).ok_or_else(|| format!("unknown suite {suite:?}"))?]
    };
    let mut rng = Rng::new(cfg.seed);
    let mut all_ok = true;
    let mut rendered = String::new();
    for s in suites {
        let report = run_suite(s, &mut rng, trials);
        all_ok &= report.passed();
        rendered.push_str(&report.render());
    }
    print!("{rendered}");
    write_file(&common.out, "verify.txt", rendered.as_bytes())?;
    Ok(all_ok)
}

fn cmd_diagnose(
    common: &CommonArgs,
    checkpoint: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(common)?;
    let mut rng = Rng::new(cfg.seed);
    let dataset = load_dataset(&cfg, &mut rng)?;
    let ens = match checkpoint {
        Some(path) => ensemble::load_checkpoint(File::open(path)?)?,
        None => {
            let spec = cfg.model_spec(dataset.input_dim())?;
            ParticleEnsemble::init(spec, cfg.train.particles, &mut rng)
        }
    };
    let llm = ensemble::loglik_matrix(&ens, &dataset)?;
    let report = RepulsionReport::from_loglik_matrix(&llm, 1.0)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_file(&common.out, "repulsion.csv", &buf)?;
    println!(
        "diagnose: {} data, mean gap {:.6}, chains ok: {}",
        report.rows.len(),
        report.mean_gap(),
        report.all_chains_ok()
    );
    Ok(())
}

fn cmd_toy(common: &CommonArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = load_config(common)?;
    cfg.data.source = "toy".into();
    let outcome = run_regression_experiment(&cfg, cfg.seed)?;
    let grid = outcome.interval_grid.as_ref().expect("toy data is one-dimensional");
    let mut buf = Vec::new();
    write_interval_csv(grid, &mut buf)?;
    write_file(&common.out, "intervals.csv", &buf)?;
    let mut buf = Vec::new();
    outcome.repulsion.write_csv(&mut buf)?;
    write_file(&common.out, "repulsion.csv", &buf)?;
    println!(
        "toy: mean rmse {:.4}, chains ok: {}, grid rows {}",
        outcome.mean_rmse,
        outcome.repulsion.all_chains_ok(),
        grid.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<bool, Box<dyn std::error::Error>> = match &cli.command {
        Command::Train(c) => cmd_train(c).map(|_| true),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint).map(|_| true),
        Command::Bandit(c) => cmd_bandit(c).map(|_| true),
        Command::Verify { common, suite, trials } => cmd_verify(common, suite, *trials),
        Command::Diagnose { common, checkpoint } => {
            cmd_diagnose(common, checkpoint.as_deref()).map(|_| true)
        }
        Command::Toy(c) => cmd_toy(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
