//! Verification suite: gradient checks, invariants, exact oracles and the
//! convergence-rate study. Each check returns a [`CheckOutcome`]; the suite
//! fails if any check does.

use std::time::Instant;

use hdro::ambiguity::{
    ball_max_brute_force_2d, inner_maximize, project_ball, robust_risk_check, taylor_gap, w_infty_exact,
    AmbiguityConfig, Atom, DiscreteDist,
};
use hdro::convergence::{canonical_instance, convergence_study, ConvergenceReport, StudyConfig};
use hdro::datagen::{make_spurious, SpuriousRecipe};
use hdro::linalg;
use hdro::model::{Architecture, FeaturePath, ModelParams};
use hdro::solver::{sample_batch, train, train_step, update_beta, Mode, SolverConfig, TrainState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Latent-gradient implementation under test; swappable for fault injection.
pub type LatentGradFn = fn(&ModelParams, &[f64], usize) -> hdro::Result<Vec<f64>>;

pub fn model_latent_grad(theta: &ModelParams, z: &[f64], y: usize) -> hdro::Result<Vec<f64>> {
    theta.grad_wrt_latent(z, y)
}

/// Deliberately wrong: the latent gradient with its sign flipped.
pub fn sign_flipped_latent_grad(theta: &ModelParams, z: &[f64], y: usize) -> hdro::Result<Vec<f64>> {
    Ok(theta.grad_wrt_latent(z, y)?.into_iter().map(|v| -v).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Fast,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
    #[serde(default)]
    pub convergence: Option<ConvergenceReport>,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String), String>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = linalg::distance(a, b);
    diff / linalg::norm(a).max(linalg::norm(b)).max(1e-6)
}

/// Maximum relative error of latent and parameter gradients against central
/// differences over `instances` random `(theta, x, y)`.
pub fn gradient_error(arch: Architecture, instances: usize, seed: u64, latent_grad: LatentGradFn) -> hdro::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 5;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let k = if done % 2 == 0 { 2 } else { 3 };
        let base = ModelParams::init(arch, d, 6, k, rng.random());
        let theta = base.with_flat(&base.to_flat().iter().map(|v| 3.0 * v).collect::<Vec<_>>())?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = rng.random_range(0..k);
        // Resample near the relu kink, where differences straddle it.
        if theta
            .hidden
            .as_ref()
            .is_some_and(|h| h.apply(&x).iter().any(|p| p.abs() < 1e-4))
        {
            continue;
        }
        let z = theta.latent(&x)?;
        let gz = latent_grad(&theta, &z, y)?;
        let mut fd = Vec::with_capacity(z.len());
        for i in 0..z.len() {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += FD_STEP;
            zm[i] -= FD_STEP;
            fd.push((theta.loss_at_latent(&zp, y)? - theta.loss_at_latent(&zm, y)?) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&gz, &fd));

        let gp = theta.grad_wrt_params(&z, &x, y, FeaturePath::Detached)?.to_flat();
        let flat = theta.to_flat();
        let mut fd = Vec::with_capacity(flat.len());
        for i in 0..flat.len() {
            let (mut p, mut m) = (flat.clone(), flat.clone());
            p[i] += FD_STEP;
            m[i] -= FD_STEP;
            let lp = theta.with_flat(&p)?.forward(&x, y)?.loss;
            let lm = theta.with_flat(&m)?.forward(&x, y)?.loss;
            fd.push((lp - lm) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&gp, &fd));
        done += 1;
    }
    Ok(worst)
}

pub fn gradient_check(instances: usize, seed: u64, latent_grad: LatentGradFn) -> CheckOutcome {
    timed("gradients", || {
        let lin = gradient_error(Architecture::Linear, instances, seed, latent_grad).map_err(|e| e.to_string())?;
        let mlp = gradient_error(Architecture::Mlp1, instances, seed + 1, latent_grad).map_err(|e| e.to_string())?;
        Ok((
            lin <= GRADIENT_TOLERANCE && mlp <= GRADIENT_TOLERANCE,
            format!("{instances} instances per architecture; max rel error linear {lin:.2e}, mlp {mlp:.2e}"),
        ))
    })
}

/// Projection lands in the ball and is idempotent; weight updates stay on the simplex.
pub fn projection_simplex_check(cases: usize, seed: u64) -> CheckOutcome {
    timed("projection_and_simplex", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_ball = 0.0f64;
        let mut worst_sum = 0.0f64;
        for _ in 0..cases {
            let d = rng.random_range(1..8);
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let eps = rng.random_range(0.0..3.0);
            let p = project_ball(&z, &c, eps).map_err(|e| e.to_string())?;
            let again = project_ball(&p, &c, eps).map_err(|e| e.to_string())?;
            worst_ball = worst_ball
                .max(linalg::distance(&p, &c) - eps)
                .max(linalg::distance(&p, &again));
            let m = rng.random_range(2..8);
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let beta: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let b = update_beta(
                &beta,
                rng.random_range(0..m),
                rng.random_range(0.0..30.0),
                rng.random_range(0.001..3.0),
                1.0,
                10,
            )
            .map_err(|e| e.to_string())?;
            worst_sum = worst_sum.max((b.iter().sum::<f64>() - 1.0).abs());
            if b.iter().any(|&v| v < 0.0) {
                return Ok((false, "negative weight".into()));
            }
        }
        Ok((
            worst_ball <= 1e-12 && worst_sum <= 1e-12,
            format!("{cases} cases; ball violation {worst_ball:.1e}, simplex error {worst_sum:.1e}"),
        ))
    })
}

/// One projected step with a large step size against the angular brute force,
/// on random binary-logistic linear instances in a 2-D latent.
pub fn inner_max_check(instances: usize, seed: u64) -> CheckOutcome {
    timed("inner_maximization", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let theta = random_linear_2d(&mut rng);
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let y = rng.random_range(0..2);
            let eps = rng.random_range(0.05..1.5);
            let run = || -> hdro::Result<f64> {
                let zp = inner_maximize(&theta, &z, y, eps, 1, 1e9)?;
                let got = theta.loss_at_latent(&zp, y)?;
                let brute = ball_max_brute_force_2d(&theta, &z, y, eps)?.value;
                Ok((got - brute).abs())
            };
            worst = worst.max(run().map_err(|e| e.to_string())?);
        }
        Ok((
            worst <= 1e-9,
            format!("{instances} instances; max loss difference {worst:.2e}"),
        ))
    })
}

fn random_linear_2d(rng: &mut ChaCha8Rng) -> ModelParams {
    let mut theta = ModelParams::linear_zeros(2, 2);
    for w in theta.output.weights.iter_mut().chain(theta.output.bias.iter_mut()) {
        *w = rng.random_range(-2.0..2.0);
    }
    theta
}

/// Pointwise versus distributional worst-case risk on 4-atom 2-D instances.
pub fn risk_equivalence_check(instances: usize, seed: u64) -> CheckOutcome {
    timed("pointwise_vs_distributional", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let theta = random_linear_2d(&mut rng);
            let atoms: Vec<(Vec<f64>, usize)> = (0..4)
                .map(|_| {
                    (
                        vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                        rng.random_range(0..2),
                    )
                })
                .collect();
            let eps = rng.random_range(0.1..1.0);
            let p = DiscreteDist::uniform(atoms).map_err(|e| e.to_string())?;
            let check = robust_risk_check(&p, &theta, eps).map_err(|e| e.to_string())?;
            if check.maximizer_distance > eps * (1.0 + 1e-12) {
                return Ok((false, format!("maximizer outside the ball: {check:?}")));
            }
            worst = worst.max(check.discrepancy());
        }
        Ok((
            worst <= 1e-3,
            format!("{instances} instances; max discrepancy {worst:.2e}"),
        ))
    })
}

pub const TAYLOR_RADII: [f64; 4] = [0.4, 0.2, 0.1, 0.05];

/// Least-squares log-log slope of the first-order remainder against the radius.
pub fn taylor_slope(theta: &ModelParams, z: &[f64], y: usize) -> hdro::Result<f64> {
    let mut pts = Vec::new();
    for &e in &TAYLOR_RADII {
        let gap = taylor_gap(theta, z, y, e)?;
        if gap <= 1e-300 {
            // Remainder vanishes identically: higher than any order.
            return Ok(f64::INFINITY);
        }
        pts.push((e.ln(), gap.ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(num / den)
}

pub fn taylor_check(instances: usize, seed: u64) -> CheckOutcome {
    timed("taylor_remainder_order", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut good = 0;
        let mut slopes = Vec::with_capacity(instances);
        for _ in 0..instances {
            let theta = ModelParams::init(Architecture::Mlp1, 3, 5, 3, rng.random());
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let y = rng.random_range(0..3);
            let slope = theta
                .latent(&x)
                .and_then(|z| taylor_slope(&theta, &z, y))
                .map_err(|e| e.to_string())?;
            if slope >= 1.5 {
                good += 1;
            }
            slopes.push(slope);
        }
        let frac = good as f64 / instances as f64;
        let finite: Vec<f64> = slopes.into_iter().filter(|s| s.is_finite()).collect();
        let median = if finite.is_empty() {
            f64::NAN
        } else {
            let mut s = finite.clone();
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        };
        Ok((
            frac >= 0.9,
            format!("{good}/{instances} slopes >= 1.5 (median {median:.3})"),
        ))
    })
}

fn random_dist(rng: &mut ChaCha8Rng, labels: &[usize]) -> DiscreteDist {
    DiscreteDist::uniform(
        labels
            .iter()
            .map(|&l| (vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)], l))
            .collect(),
    )
    .expect("valid atoms")
}

/// Symmetry, identity and the triangle inequality on random equal-mass
/// triples; label disagreement must give an infinite distance.
pub fn w_infty_check(triples: usize, seed: u64) -> CheckOutcome {
    timed("w_infinity_metric", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slack = f64::NEG_INFINITY;
        for _ in 0..triples {
            let n = rng.random_range(2..=6);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let p = random_dist(&mut rng, &labels);
            let q = random_dist(&mut rng, &labels);
            let r = random_dist(&mut rng, &labels);
            let w = |a: &DiscreteDist, b: &DiscreteDist| w_infty_exact(a, b).map_err(|e| e.to_string());
            let (pq, qp, pr, qr) = (w(&p, &q)?, w(&q, &p)?, w(&p, &r)?, w(&q, &r)?);
            if pq != qp {
                return Ok((false, format!("asymmetric: {pq} vs {qp}")));
            }
            if w(&p, &p)? != 0.0 {
                return Ok((false, "nonzero self distance".into()));
            }
            let mut shuffled: Vec<Atom> = p.atoms().to_vec();
            shuffled.shuffle(&mut rng);
            if w(&p, &DiscreteDist::new(shuffled).map_err(|e| e.to_string())?)? != 0.0 {
                return Ok((false, "reordered atoms at positive distance".into()));
            }
            if pr > pq + qr + 1e-12 {
                return Ok((false, format!("triangle violated: {pr} > {pq} + {qr}")));
            }
            if pr.is_finite() {
                slack = slack.max(pr - pq - qr);
            }
            let mut flipped: Vec<Atom> = p.atoms().to_vec();
            let k = rng.random_range(0..n);
            flipped[k].label = 1 - flipped[k].label;
            let cross = w(&p, &DiscreteDist::new(flipped).map_err(|e| e.to_string())?)?;
            if cross != f64::INFINITY {
                return Ok((false, format!("label change gave finite distance {cross}")));
            }
        }
        Ok((true, format!("{triples} triples; worst triangle slack {slack:.2e}")))
    })
}

/// Simplex feasibility over a long run, Group DRO as the zero-radius
/// hierarchical run, and ERM as plain stochastic gradient descent.
pub fn degeneracy_check(steps: u64, seed: u64) -> CheckOutcome {
    timed("simplex_and_degeneracy", || {
        let err = |e: hdro::HdroError| e.to_string();
        let ds = make_spurious(
            &SpuriousRecipe {
                n_per_group: vec![120, 30, 20, 120],
                spurious_strength: 0.8,
                noise_sd: 0.6,
                label_flip_p: 0.05,
            },
            seed,
        )
        .map_err(err)?;
        let mut cfg = SolverConfig::new(Mode::Hierarchical);
        cfg.eta_beta = 0.2;
        cfg.adjustment_c = 1.0;
        cfg.seed = seed;
        let amb = AmbiguityConfig::new(2.0, ds.group_sizes()).map_err(err)?;
        let init = ModelParams::init(Architecture::Mlp1, ds.dim(), 8, 2, seed);
        let mut state = TrainState::new(init.clone(), Mode::Hierarchical, ds.proportions());
        let rows = ds.rows_by_group();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut simplex_err = 0.0f64;
        for _ in 0..steps {
            let batch = sample_batch(&mut rng, &cfg, &rows, ds.proportions());
            train_step(&mut state, &ds, &batch, &cfg, &amb).map_err(err)?;
            simplex_err = simplex_err.max((state.beta.iter().sum::<f64>() - 1.0).abs());
            if state.beta.iter().any(|&b| b < 0.0) {
                return Ok((false, "negative group weight".into()));
            }
        }

        let mut dro = cfg.clone();
        dro.mode = Mode::GroupDro;
        dro.iterations = 2000;
        dro.checkpoint_every = 250;
        let mut hier = dro.clone();
        hier.mode = Mode::Hierarchical;
        let zero = AmbiguityConfig::new(0.0, ds.group_sizes()).map_err(err)?;
        let a = train(&ds, Some(&ds), init.clone(), &dro, &amb).map_err(err)?;
        let b = train(&ds, Some(&ds), init.clone(), &hier, &zero).map_err(err)?;
        let identical = a.final_state == b.final_state && a.selected == b.selected;

        let mut erm = SolverConfig::new(Mode::Erm);
        erm.iterations = 2000;
        erm.seed = seed;
        let run = train(&ds, None, init.clone(), &erm, &amb).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = init;
        for _ in 0..erm.iterations {
            let batch = sample_batch(&mut rng, &erm, &rows, ds.proportions());
            let mut grad = theta.zeros_like();
            for &i in &batch.rows {
                let g = theta
                    .forward_with_grads(ds.row(i), ds.labels()[i])
                    .map_err(err)?
                    .grad_theta
                    .expect("gradient requested");
                grad.axpy(1.0 / batch.rows.len() as f64, &g);
            }
            theta.axpy(-erm.eta_theta, &grad);
        }
        let erm_matches = run.final_state.theta == theta && run.final_state.beta == ds.proportions();

        Ok((
            simplex_err <= 1e-12 && identical && erm_matches,
            format!(
                "{steps} steps, simplex error {simplex_err:.1e}; group DRO == zero-radius run: {identical}; ERM == SGD: {erm_matches}"
            ),
        ))
    })
}

/// Gap-ratio and bound checks on the canonical convex instance.
pub fn convergence_check(config: &StudyConfig) -> (CheckOutcome, Option<ConvergenceReport>) {
    let mut report = None;
    let outcome = timed("convergence_rate", || {
        let (ds, amb) = canonical_instance(0).map_err(|e| e.to_string())?;
        let r = convergence_study(&ds, &amb, config).map_err(|e| e.to_string())?;
        let ratios_ok = !r.ratios.is_empty() && r.ratios.iter().all(|&(_, q)| q <= 0.75);
        let nonneg = r.horizons.iter().all(|h| h.gap >= -1e-4);
        let detail = format!(
            "reference {:.8} (+-{:.1e}); gaps {}; ratios {}; bounds {}",
            r.reference.value,
            r.reference.tolerance,
            r.horizons
                .iter()
                .map(|h| format!("T={}: {:.5}", h.horizon, h.gap))
                .collect::<Vec<_>>()
                .join(", "),
            r.ratios
                .iter()
                .map(|(t, q)| format!("{t}->4x: {q:.3}"))
                .collect::<Vec<_>>()
                .join(", "),
            r.horizons
                .iter()
                .map(|h| format!("{:.3}", h.bound))
                .collect::<Vec<_>>()
                .join(", "),
        );
        let passed = ratios_ok && nonneg && r.bound_respected();
        report = Some(r);
        Ok((passed, detail))
    });
    (outcome, report)
}

pub fn run_verify(level: VerifyLevel, latent_grad: LatentGradFn) -> VerifyReport {
    let full = level == VerifyLevel::Full;
    let mut checks = vec![
        gradient_check(100, 1, latent_grad),
        projection_simplex_check(1000, 2),
        inner_max_check(50, 3),
        risk_equivalence_check(if full { 20 } else { 3 }, 4),
        taylor_check(if full { 50 } else { 20 }, 5),
        w_infty_check(100, 6),
        degeneracy_check(if full { 10_000 } else { 2_000 }, 7),
    ];
    let mut convergence = None;
    if full {
        let (c, r) = convergence_check(&StudyConfig::default());
        checks.push(c);
        convergence = r;
    }
    VerifyReport {
        level,
        passed: checks.iter().all(|c| c.passed),
        checks,
        convergence,
    }
}
