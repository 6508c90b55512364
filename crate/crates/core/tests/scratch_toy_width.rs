//! Throwaway probe: off-data epistemic width per rule on the toy setup.

use pvi_core::harness::config::Config;
use pvi_core::harness::experiment::run_regression_experiment;

#[test]
#[ignore]
fn probe_widths() {
    for rule in ["map", "var", "svgd"] {
        let text = format!(
            r#"
            seed = 210
            [model]
            hidden = [50, 50]
            sigma = 0.2
            [update]
            rule = "{rule}"
            bandwidth = "h"
            step_size = 0.001
            [train]
            particles = 20
            epochs = 1500
            batch_size = 100
            [data]
            source = "toy"
            toy_points = 20
            "#
        );
        let cfg = Config::from_str(&text).unwrap();
        let out = run_regression_experiment(&cfg, cfg.seed).unwrap();
        let grid = out.interval_grid.as_ref().unwrap();
        let at = |x: f64| {
            grid.iter()
                .min_by(|a, b| (a.x - x).abs().partial_cmp(&(b.x - x).abs()).unwrap())
                .unwrap()
        };
        println!(
            "{rule}: width@1.2 {:.3}, width@0.3 {:.3}, rmse {:.3}",
            at(1.2).mean_width(),
            at(0.3).mean_width(),
            out.mean_rmse
        );
    }
}
