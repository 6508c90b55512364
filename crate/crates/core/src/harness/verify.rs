//! Property-verification suites: numerically certify the inequality chains,
//! identities, and gradient derivations on randomized inputs, reporting
//! counterexamples verbatim.

use crate::ensemble::{bma_log_predictive, ParticleEnsemble};
use crate::harness::data::Dataset;
use crate::jensen::{self, BandwidthKind, CHAIN_TOLERANCE};
use crate::models::{self, Activation, ModelSpec, Prior};
use crate::numerics::{finite_diff_grad, Rng};
use crate::updates::{self, KernelBandwidth, RuleKind};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Jensen,
    Gradients,
    Updates,
    Identities,
}

impl Suite {
    pub fn parse(name: &str) -> Option<Suite> {
        Some(match name {
            "jensen" => Suite::Jensen,
            "gradients" => Suite::Gradients,
            "updates" => Suite::Updates,
            "identities" => Suite::Identities,
            _ => return None,
        })
    }

    pub fn all() -> [Suite; 4] {
        [Suite::Jensen, Suite::Gradients, Suite::Updates, Suite::Identities]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Jensen => "jensen",
            Suite::Gradients => "gradients",
            Suite::Updates => "updates",
            Suite::Identities => "identities",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub trials: u64,
    pub violations: u64,
    /// Up to a handful of counterexamples, inputs and both sides included.
    pub examples: Vec<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "suite {}: {}", self.suite, if self.passed() { "PASS" } else { "FAIL" });
        for c in &self.checks {
            let _ = writeln!(
                out,
                "  [{}] {} — {} trials, {} violations",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.trials,
                c.violations
            );
            for e in &c.examples {
                let _ = writeln!(out, "      counterexample: {e}");
            }
        }
        out
    }
}

struct Check {
    name: String,
    trials: u64,
    violations: u64,
    examples: Vec<String>,
}

impl Check {
    fn new(name: &str) -> Self {
        Check { name: name.to_string(), trials: 0, violations: 0, examples: Vec::new() }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.violations += 1;
            if self.examples.len() < 5 {
                self.examples.push(detail());
            }
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            trials: self.trials,
            violations: self.violations,
            examples: self.examples,
        }
    }
}

fn random_column(rng: &mut Rng) -> Vec<f64> {
    let n = 2 + rng.below(49);
    (0..n).map(|_| rng.uniform(-10.0, 0.0)).collect()
}

fn jensen_suite(rng: &mut Rng, trials: u64) -> SuiteReport {
    let mut chain_h = Check::new("second-order chain with bandwidth h");
    let mut monotone = Check::new("R(h_m) <= R(h)");
    let mut chain_med = Check::new("second-order chain with the median bandwidth");
    let mut wsgld = Check::new("row-normalized chain: 0 <= R_w <= R_c and mean + R_w <= bma");
    let mut gfsf = Check::new("log-det chain with auto-selected rescaling");
    let mut dpp = Check::new("diversity ordering: bma >= mean >= mean+upper >= mean+lower");
    let mut witness = Check::new("equality-witness interval brackets the gap");
    let mut vbound = Check::new("predictive variance lies in [0, 1/2]");

    for _ in 0..trials {
        let l = random_column(rng);
        let m = l.iter().sum::<f64>() / l.len() as f64;
        let bma = bma_log_predictive(&l);

        let r_h = jensen::repulsion_r(BandwidthKind::H, &l);
        chain_h.record(r_h >= 0.0 && m + r_h <= bma + CHAIN_TOLERANCE, || {
            format!("L={l:?} mean={m} R={r_h} bma={bma} slack={}", bma - m - r_h)
        });

        let r_hm = jensen::repulsion_r(BandwidthKind::Hm, &l);
        monotone.record(r_hm <= r_h + 1e-12, || format!("L={l:?} R_hm={r_hm} R_h={r_h}"));

        let r_med = jensen::repulsion_r(BandwidthKind::HMedian, &l);
        chain_med.record(r_med >= 0.0 && m + r_med <= bma + CHAIN_TOLERANCE, || {
            format!("L={l:?} R_med={r_med} slack={}", bma - m - r_med)
        });

        let r_w = jensen::repulsion_rw(&l);
        let r_c = jensen::repulsion_rc(&l);
        wsgld.record(
            r_w >= -CHAIN_TOLERANCE && r_w <= r_c + 1e-12 && m + r_w <= bma + CHAIN_TOLERANCE,
            || format!("L={l:?} R_w={r_w} R_c={r_c} slack={}", bma - m - r_w),
        );

        let rg = jensen::repulsion_rg(&l, 1.0);
        gfsf.record(
            rg.value >= 0.0 && m + rg.value <= bma + CHAIN_TOLERANCE,
            || {
                format!(
                    "L={l:?} R_g={} tilde_h={} eps={} slack={}",
                    rg.value,
                    rg.tilde_h,
                    rg.epsilon,
                    bma - m - rg.value
                )
            },
        );

        match jensen::repulsion_rd(&l) {
            Ok(forms) => {
                let upper = forms.upper.unwrap_or(0.0);
                dpp.record(
                    bma + CHAIN_TOLERANCE >= m
                        && upper <= CHAIN_TOLERANCE
                        && upper + CHAIN_TOLERANCE >= forms.lower,
                    || format!("L={l:?} upper={upper} lower={}", forms.lower),
                );
            }
            Err(e) => dpp.record(false, || format!("L={l:?} error={e}")),
        }

        let w = jensen::second_order_equality_witness(&l);
        witness.record(w.brackets(), || format!("L={l:?} witness={w:?}"));

        let p: Vec<f64> = l.iter().map(|x| x.exp()).collect();
        let v = jensen::predictive_variance_v(&p);
        vbound.record((0.0..=0.5).contains(&v), || format!("p={p:?} V={v}"));
    }
    SuiteReport {
        suite: Suite::Jensen.name(),
        checks: vec![
            chain_h.finish(),
            monotone.finish(),
            chain_med.finish(),
            wsgld.finish(),
            gfsf.finish(),
            dpp.finish(),
            witness.finish(),
            vbound.finish(),
        ],
    }
}

fn identities_suite(rng: &mut Rng, trials: u64) -> SuiteReport {
    let mut cov = Check::new("variance identity to 1e-10 relative");
    let mut lemma = Check::new("sqrt-product inequality on positive pairs");
    for _ in 0..trials {
        let l = random_column(rng);
        let (lhs, rhs) = jensen::covariance_identity_check(&l);
        cov.record((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), || {
            format!("L={l:?} lhs={lhs} rhs={rhs}")
        });

        let a = rng.uniform(1e-6, 100.0);
        let b = rng.uniform(1e-6, 100.0);
        lemma.record(jensen::lemma_sqrt_check(a, b), || {
            format!("a={a} b={b} lhs={} rhs={}", (a.ln() - b.ln()).powi(2) * a * b, (a - b).powi(2))
        });
    }
    SuiteReport {
        suite: Suite::Identities.name(),
        checks: vec![cov.finish(), lemma.finish()],
    }
}

fn random_regression_setup(
    rng: &mut Rng,
    classification: bool,
) -> (ParticleEnsemble, Dataset, Prior) {
    let mut spec = if classification {
        ModelSpec::classification(2, &[3], 3)
    } else {
        ModelSpec::regression(2, &[3], 0.4, rng.below(2) == 0)
    };
    // smooth activation keeps finite differences meaningful
    spec.activation = Activation::Tanh;
    let n = 2 + rng.below(2);
    let ens = ParticleEnsemble::init(spec, n, rng);
    let d = 2 + rng.below(2);
    let inputs: Vec<Vec<f64>> =
        (0..d).map(|_| vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect();
    let targets: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            if classification {
                vec![rng.below(3) as f64]
            } else {
                vec![rng.uniform(-1.0, 1.0)]
            }
        })
        .collect();
    (ens, Dataset::from_parts(inputs, targets), Prior::unit())
}

fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-2))
        .fold(0.0, f64::max)
}

fn gradients_suite(rng: &mut Rng, trials: u64) -> SuiteReport {
    let trials = trials.min(200);
    let mut loglik = Check::new("log-likelihood gradient vs central differences");
    let mut logprior = Check::new("log-prior gradient vs central differences");
    let mut chain = Check::new("pullback chain consistency");
    for t in 0..trials {
        let classification = t % 2 == 1;
        let (ens, data, prior) = random_regression_setup(rng, classification);
        let p = ens.particle(0);
        let x = data.input(0);
        let y = data.target(0);
        let g = models::grad_log_lik(&ens.spec, p, x, y).unwrap();
        let fd = finite_diff_grad(
            |q| models::log_lik(&ens.spec, q, x, y).unwrap(),
            p,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&g, &fd);
        loglik.record(err < 1e-4, || format!("spec={:?} err={err}", ens.spec.likelihood));

        let gp = models::grad_log_prior(&prior, p);
        let fdp = finite_diff_grad(|q| models::log_prior(&prior, q), p, 1e-5).unwrap();
        let errp = max_rel_err(&gp, &fdp);
        logprior.record(errp < 1e-4, || format!("err={errp}"));

        let og = models::grad_output(&ens.spec, p, x, y).unwrap();
        let chained = og.pullback(&ens.spec, p, &og.dloglik_doutput);
        let worst = g
            .iter()
            .zip(&chained)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // learnable-noise coordinate flows outside the output pullback
        let cutoff = if ens.spec.learnable_sigma() { g.len() - 1 } else { g.len() };
        let worst_net = g[..cutoff]
            .iter()
            .zip(&chained[..cutoff])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let _ = worst;
        chain.record(worst_net < 1e-10, || format!("max abs deviation {worst_net}"));
    }
    SuiteReport {
        suite: Suite::Gradients.name(),
        checks: vec![loglik.finish(), logprior.finish(), chain.finish()],
    }
}

fn updates_suite(rng: &mut Rng, trials: u64) -> SuiteReport {
    let trials = trials.min(60);
    let mut collapse = Check::new("single-particle collapse to the plain gradient");
    let mut coincide = Check::new("zero repulsion at coincident particles");
    let mut var_fd = Check::new("variance-objective gradient vs central differences");
    let mut pac_fd = Check::new("predictive-variance-objective gradient vs central differences");
    let mut dpp_fd = Check::new("diversity-objective gradient vs central differences");
    let mut wsgld_der = Check::new("row-normalized middle-term derivative vs central differences");
    let mut gfsf_der = Check::new("log-det term derivative vs central differences");

    for t in 0..trials {
        let classification = t % 2 == 1;
        let (ens, data, prior) = random_regression_setup(rng, classification);

        // single-particle collapse
        {
            let single = ens.with_particles(vec![ens.particle(0).clone()]);
            let mut map = models::grad_log_prior(&prior, single.particle(0));
            for d in 0..data.len() {
                let gl = models::grad_log_lik(
                    &single.spec,
                    single.particle(0),
                    data.input(d),
                    data.target(d),
                )
                .unwrap();
                for (a, b) in map.iter_mut().zip(&gl) {
                    *a += b;
                }
            }
            let kb = KernelBandwidth::MedianTrick;
            let mut worst = 0.0f64;
            for kind in [RuleKind::Svgd, RuleKind::Wsgld, RuleKind::Gfsd, RuleKind::Gfsf] {
                let dirs = match kind {
                    RuleKind::Svgd => updates::svgd_direction(&single, &data, &prior, kb),
                    RuleKind::Wsgld => updates::wsgld_direction(&single, &data, &prior, kb),
                    RuleKind::Gfsd => updates::gfsd_direction(&single, &data, &prior, kb),
                    _ => updates::gfsf_direction(&single, &data, &prior, kb),
                }
                .unwrap();
                worst = worst.max(
                    dirs[0]
                        .iter()
                        .zip(&map)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max),
                );
            }
            let vg = updates::var_grad(&single, &data, &prior, BandwidthKind::H).unwrap();
            worst = worst.max(
                vg[0].iter().zip(&map).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max),
            );
            collapse.record(worst < 1e-10, || format!("max deviation {worst}"));
        }

        // coincident particles
        {
            let p = ens.particle(0).clone();
            let same = ens.with_particles(vec![p.clone(), p.clone(), p]);
            let svgd = updates::svgd_direction(&same, &data, &prior, KernelBandwidth::Fixed(0.7))
                .unwrap();
            let mut g = models::grad_log_prior(&prior, same.particle(0));
            for d in 0..data.len() {
                let gl = models::grad_log_lik(
                    &same.spec,
                    same.particle(0),
                    data.input(d),
                    data.target(d),
                )
                .unwrap();
                for (a, b) in g.iter_mut().zip(&gl) {
                    *a += b;
                }
            }
            let worst = svgd
                .iter()
                .flat_map(|dir| dir.iter().zip(&g).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            coincide.record(worst < 1e-10, || format!("max deviation {worst}"));
        }

        // objective gradients vs finite differences, one particle probed
        let probe = rng.below(ens.len());
        let fd_of = |obj: &dyn Fn(&ParticleEnsemble) -> f64| {
            finite_diff_grad(
                |coords| {
                    let mut parts = ens.particles().to_vec();
                    parts[probe] = coords.to_vec();
                    obj(&ens.with_particles(parts))
                },
                ens.particle(probe),
                1e-5,
            )
            .unwrap()
        };
        let kind = match t % 3 {
            0 => BandwidthKind::H,
            1 => BandwidthKind::Hm,
            _ => BandwidthKind::HMedian,
        };
        let vg = updates::var_grad(&ens, &data, &prior, kind).unwrap();
        let fd = fd_of(&|e| updates::var_objective(e, &data, &prior, kind).unwrap());
        let err = max_rel_err(&vg[probe], &fd);
        var_fd.record(err < 1e-4, || format!("kind={kind:?} err={err}"));

        let pg = updates::pac2e_grad(&ens, &data, &prior).unwrap();
        let fd = fd_of(&|e| updates::pac2e_objective(e, &data, &prior).unwrap());
        let err = max_rel_err(&pg[probe], &fd);
        pac_fd.record(err < 1e-4, || format!("err={err}"));

        let kb = KernelBandwidth::MedianTrick;
        let dg = updates::dpp_grad(&ens, &data, &prior, kb).unwrap();
        let fd = fd_of(&|e| updates::dpp_objective(e, &data, &prior, kb).unwrap());
        let err = max_rel_err(&dg[probe], &fd);
        dpp_fd.record(err < 1e-4, || format!("err={err}"));

        // derivation consistency on loss vectors
        let l: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 0.0)).collect();
        let w = jensen::hw_inv_sq(&l);
        let g = updates::wsgld_middle_loss_grad(&l, w);
        let fd = finite_diff_grad(|ll| updates::wsgld_middle_term(ll, w), &l, 1e-6).unwrap();
        let err = max_rel_err(&g, &fd);
        wsgld_der.record(err < 1e-5, || format!("L={l:?} err={err}"));

        let g = updates::gfsf_logdet_loss_grad(&l, 8.0, 1.0, w);
        let fd =
            finite_diff_grad(|ll| updates::gfsf_logdet_term(ll, 8.0, 1.0, w), &l, 1e-6).unwrap();
        let err = max_rel_err(&g, &fd);
        gfsf_der.record(err < 1e-5, || format!("L={l:?} err={err}"));
    }

    SuiteReport {
        suite: Suite::Updates.name(),
        checks: vec![
            collapse.finish(),
            coincide.finish(),
            var_fd.finish(),
            pac_fd.finish(),
            dpp_fd.finish(),
            wsgld_der.finish(),
            gfsf_der.finish(),
        ],
    }
}

/// Run one named suite with the given trial budget.
pub fn run_suite(suite: Suite, rng: &mut Rng, trials: u64) -> SuiteReport {
    assert!(trials >= 1);
    match suite {
        Suite::Jensen => jensen_suite(rng, trials),
        Suite::Identities => identities_suite(rng, trials),
        Suite::Gradients => gradients_suite(rng, trials),
        Suite::Updates => updates_suite(rng, trials),
    }
}
