//! Throwaway probe: predictive spread kept by each rule on a fixed buffer.

use pvi_core::ensemble::ParticleEnsemble;
use pvi_core::harness::data::Dataset;
use pvi_core::jensen::BandwidthKind;
use pvi_core::models::{self, ModelSpec, Prior};
use pvi_core::numerics::Rng;
use pvi_core::updates::{self, RuleKind, UpdateRule};

#[test]
#[ignore]
fn probe_spread() {
    let mut rng = Rng::new(7);
    // misspecified: linear model, folded (absolute-value) target
    let spec = ModelSpec::regression(2, &[32], 0.2, false);
    let d = 200;
    let w_true = [0.8, -0.6];
    let inputs: Vec<Vec<f64>> =
        (0..d).map(|_| (0..2).map(|_| rng.normal()).collect()).collect();
    let targets: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| {
            let proj: f64 = x.iter().zip(&w_true).map(|(a, b)| a * b).sum();
            vec![proj.tanh() + 1.0 * rng.normal()]
        })
        .collect();
    let data = Dataset::from_parts(inputs.clone(), targets);
    let prior = Prior::unit();
    let ens0 = ParticleEnsemble::init(spec.clone(), 10, &mut rng);

    for kind in [RuleKind::Map, RuleKind::Var, RuleKind::VarSvgd] {
        let mut rule = UpdateRule::new(kind, 0.001);
        rule.bandwidth = BandwidthKind::H;
        let mut train_rng = Rng::new(1);
        let (out, _) =
            updates::train(&rule, &ens0, &data, &prior, 1000, 10_000, &mut train_rng).unwrap();
        let mut spread = 0.0;
        let mut slope_spread = 0.0;
        let mut probe_rng = Rng::new(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| probe_rng.normal()).collect();
            let preds: Vec<f64> = out
                .particles()
                .iter()
                .map(|p| models::forward(&spec, p, &x).unwrap()[0])
                .collect();
            let m = preds.iter().sum::<f64>() / preds.len() as f64;
            let var = preds.iter().map(|f| (f - m) * (f - m)).sum::<f64>() / preds.len() as f64;
            spread += var.sqrt() / 50.0;
        }
        // weight diversity: std of the first weight across particles
        let w0: Vec<f64> = out.particles().iter().map(|p| p[0]).collect();
        let mw = w0.iter().sum::<f64>() / w0.len() as f64;
        slope_spread += (w0.iter().map(|v| (v - mw) * (v - mw)).sum::<f64>() / w0.len() as f64).sqrt();
        println!("{kind:?}: predictive std {spread:.4}, slope std {slope_spread:.4}");
    }
}
