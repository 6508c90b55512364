//! Throwaway probe: per-arm prediction spread after masked retraining.

use pvi_core::ensemble::ParticleEnsemble;
use pvi_core::harness::bandit::{reward_model_spec, retrain, BanditEnv};
use pvi_core::jensen::BandwidthKind;
use pvi_core::models::{self, Prior};
use pvi_core::numerics::Rng;
use pvi_core::updates::{RuleKind, UpdateRule};

#[test]
#[ignore]
fn probe_masked_spread() {
    let mut rng = Rng::new(3);
    let mut env_rng = rng.split();
    let env = BanditEnv::synthetic_safe_arm(3, 2, 0.3, 1.0, &mut env_rng);
    let spec = reward_model_spec(&env, &[32], 0.5);
    let ens0 = ParticleEnsemble::init(spec.clone(), 8, &mut rng);
    // buffer: random actions on random contexts
    let mut buffer = Vec::new();
    let mut brng = rng.split();
    for t in 0..300 {
        let ctx: Vec<f64> = (0..2).map(|_| brng.normal()).collect();
        let a = brng.below(3);
        // expected + noise, replicated via the public env surface
        let trace_env = env.clone();
        let (exp, noise) = match &trace_env {
            BanditEnv::SyntheticLinear { weights, biases, noise_std } => {
                let e: Vec<f64> = weights
                    .iter()
                    .zip(biases)
                    .map(|(w, b)| w.iter().zip(&ctx).map(|(x, y)| x * y).sum::<f64>() + b)
                    .collect();
                (e, noise_std * brng.normal())
            }
            _ => unreachable!(),
        };
        let _ = t;
        buffer.push((ctx, a, exp[a] + noise));
    }
    for kind in [RuleKind::Map, RuleKind::Var] {
        let mut rule = UpdateRule::new(kind, 0.02);
        rule.bandwidth = BandwidthKind::H;
        let out = retrain(&rule, &ens0, &buffer, &Prior::unit(), 600, 0.5).unwrap();
        // per-arm prediction spread at fresh contexts
        let mut prng = Rng::new(11);
        let mut spread = [0.0; 3];
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| prng.normal()).collect();
            let preds: Vec<Vec<f64>> = out
                .particles()
                .iter()
                .map(|p| models::forward(&spec, p, &x).unwrap())
                .collect();
            for a in 0..3 {
                let vals: Vec<f64> = preds.iter().map(|v| v[a]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                spread[a] += var.sqrt() / 100.0;
            }
        }
        println!("{kind:?}: per-arm prediction std {spread:?}");
    }
}
