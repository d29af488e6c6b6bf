//! Duality-gap diagnostics on convex instances.
//!
//! For a linear two-class model every robust group loss has the closed form
//! `f_g(theta) = mean softplus(-sigma_i (d . z_i + c) + eps_g ||d||)` with
//! `d = w_1 - w_0`, `c = b_1 - b_0`, `sigma_i = +-1`, so `max_g f_g` is convex
//! in `(d, c)`. The min-max reference is computed by Newton's method on the
//! smoothed maximum `tau log sum_g exp(f_g / tau)` with `tau` driven to
//! `1e-9`, and certified from below by the dual value
//! `min_theta sum_g pi_g f_g(theta)` at the final softmax weights `pi`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{self, AmbiguityConfig};
use crate::datagen::{make_spurious, GroupedDataset, SpuriousRecipe};
use crate::error::{check_len, HdroError, Result};
use crate::linalg;
use crate::model::{Architecture, FeaturePath, ModelParams};
use crate::solver::{objective_value, train, Mode, Sampling, SolverConfig, StepSchedule, TrajectoryStats};

/// Iteration count of the plain subgradient reference.
pub const SUBGRADIENT_ITERATIONS: u64 = 1_000_000;

/// Smoothing temperatures for the Newton reference.
const TEMPERATURES: [f64; 9] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-9];

fn require_convex(theta: &ModelParams) -> Result<()> {
    if theta.architecture != Architecture::Linear || theta.num_classes() != 2 {
        return Err(HdroError::UnsupportedDiagnostic(format!(
            "duality gap needs a linear two-class model, got {:?} with {} classes",
            theta.architecture,
            theta.num_classes()
        )));
    }
    Ok(())
}

/// Robust group losses as functions of `u = (d, c)`.
struct ReducedProblem<'a> {
    ds: &'a GroupedDataset,
    radii: Vec<f64>,
    groups: Vec<Vec<usize>>,
}

struct GroupTerms {
    value: Vec<f64>,
    grad: Vec<DVector<f64>>,
    hess: Vec<DMatrix<f64>>,
}

impl<'a> ReducedProblem<'a> {
    fn new(ds: &'a GroupedDataset, ambiguity: &AmbiguityConfig) -> Result<Self> {
        check_len("ambiguity radii", ds.num_groups(), ambiguity.num_groups())?;
        if ds.num_labels() != 2 {
            return Err(HdroError::UnsupportedDiagnostic("reference needs two classes".into()));
        }
        ds.require_all_groups()?;
        Ok(Self {
            ds,
            radii: (0..ds.num_groups()).map(|g| ambiguity.radius_of(g)).collect(),
            groups: ds.rows_by_group(),
        })
    }

    fn dim(&self) -> usize {
        self.ds.dim() + 1
    }

    fn terms(&self, u: &DVector<f64>, second_order: bool) -> GroupTerms {
        let p = self.dim();
        let dd = self.ds.dim();
        let d = u.rows(0, dd);
        let dnorm = d.norm();
        let dhat: DVector<f64> = if dnorm > 0.0 { d / dnorm } else { DVector::zeros(dd) };
        let mut value = Vec::with_capacity(self.groups.len());
        let mut grad = Vec::with_capacity(self.groups.len());
        let mut hess = Vec::with_capacity(self.groups.len());
        for (g, rows) in self.groups.iter().enumerate() {
            let eps = self.radii[g];
            let n = rows.len() as f64;
            let mut v = 0.0;
            let mut gr = DVector::zeros(p);
            let mut h = DMatrix::zeros(if second_order { p } else { 0 }, if second_order { p } else { 0 });
            let mut curvature_weight = 0.0;
            for &i in rows {
                let z = self.ds.row(i);
                let sign = if self.ds.labels()[i] == 1 { 1.0 } else { -1.0 };
                let margin = linalg::dot(d.as_slice(), z) + u[dd];
                let r = -sign * margin + eps * dnorm;
                v += linalg::softplus(r);
                let s = linalg::sigmoid(r);
                let mut dr = DVector::zeros(p);
                for k in 0..dd {
                    dr[k] = -sign * z[k] + eps * dhat[k];
                }
                dr[dd] = -sign;
                gr.axpy(s, &dr, 1.0);
                if second_order {
                    h.ger(s * (1.0 - s), &dr, &dr, 1.0);
                    curvature_weight += s;
                }
            }
            if second_order && eps > 0.0 && dnorm > 0.0 {
                // Hessian of eps ||d||: eps (I - dhat dhat^T) / ||d||.
                let c = curvature_weight * eps / dnorm;
                for a in 0..dd {
                    h[(a, a)] += c;
                    for b in 0..dd {
                        h[(a, b)] -= c * dhat[a] * dhat[b];
                    }
                }
            }
            value.push(v / n);
            grad.push(gr / n);
            hess.push(h / n);
        }
        GroupTerms { value, grad, hess }
    }

    /// Weighted sum with fixed weights, or the smoothed max when `tau` is given.
    fn combined(
        &self,
        u: &DVector<f64>,
        weights: Combine<'_>,
        second_order: bool,
    ) -> (f64, DVector<f64>, DMatrix<f64>, Vec<f64>) {
        let t = self.terms(u, second_order);
        let p = self.dim();
        let (value, pi) = match weights {
            Combine::Fixed(w) => (w.iter().zip(&t.value).map(|(a, b)| a * b).sum(), w.to_vec()),
            Combine::Smooth(tau) => {
                let scaled: Vec<f64> = t.value.iter().map(|v| v / tau).collect();
                (tau * linalg::log_sum_exp(&scaled), linalg::softmax(&scaled))
            }
        };
        let mut grad = DVector::zeros(p);
        for (w, gr) in pi.iter().zip(&t.grad) {
            grad.axpy(*w, gr, 1.0);
        }
        let mut hess = DMatrix::zeros(if second_order { p } else { 0 }, if second_order { p } else { 0 });
        if second_order {
            for (w, h) in pi.iter().zip(&t.hess) {
                hess += h * *w;
            }
            if let Combine::Smooth(tau) = weights {
                for (w, gr) in pi.iter().zip(&t.grad) {
                    hess.ger(*w / tau, gr, gr, 1.0);
                }
                hess.ger(-1.0 / tau, &grad, &grad, 1.0);
            }
        }
        (value, grad, hess, pi)
    }

    fn worst(&self, u: &DVector<f64>) -> f64 {
        self.terms(u, false).value.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Damped Newton with Armijo backtracking.
    fn newton(&self, mut u: DVector<f64>, weights: Combine<'_>) -> DVector<f64> {
        for _ in 0..200 {
            let (f, g, h, _) = self.combined(&u, weights, true);
            let mut reg = 1e-14 * (1.0 + h.diagonal().amax());
            let step = loop {
                let mut hr = h.clone();
                for k in 0..hr.nrows() {
                    hr[(k, k)] += reg;
                }
                if let Some(ch) = hr.cholesky() {
                    break -ch.solve(&g);
                }
                reg *= 100.0;
            };
            let decrement = -g.dot(&step);
            if !(decrement > 1e-24) {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-12 {
                let cand = &u + &step * alpha;
                let (fc, ..) = self.combined(&cand, weights, false);
                if fc <= f - 0.25 * alpha * decrement {
                    u = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        u
    }

    fn to_params(&self, u: &DVector<f64>) -> ModelParams {
        let dd = self.ds.dim();
        let mut theta = ModelParams::linear_zeros(dd, 2);
        theta.output.weights[dd..].copy_from_slice(u.rows(0, dd).as_slice());
        theta.output.bias[1] = u[dd];
        theta
    }
}

#[derive(Clone, Copy)]
enum Combine<'w> {
    Fixed(&'w [f64]),
    Smooth(f64),
}

/// Min-max optimum of `max_g f_g` with a certified bracket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptimum {
    /// `max_g f_g` at the returned minimizer (an upper bound on the optimum).
    pub value: f64,
    /// Dual value at the final group weights (a lower bound).
    pub lower_bound: f64,
    /// `value - lower_bound`.
    pub tolerance: f64,
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub theta: Option<ModelParams>,
}

/// Newton reference for `min_theta max_g f_g(theta)` on a linear two-class model.
pub fn reference_minmax(ds: &GroupedDataset, ambiguity: &AmbiguityConfig) -> Result<ReferenceOptimum> {
    let prob = ReducedProblem::new(ds, ambiguity)?;
    let dd = ds.dim();
    let mut u = DVector::zeros(prob.dim());
    // Start off the kink at d = 0, along the class-mean difference.
    for i in 0..ds.len() {
        let sign = if ds.labels()[i] == 1 { 1.0 } else { -1.0 };
        for k in 0..dd {
            u[k] += 1e-3 * sign * ds.row(i)[k] / ds.len() as f64;
        }
    }
    if u.rows(0, dd).norm() == 0.0 {
        u[0] = 1e-3;
    }
    let mut pi = vec![1.0 / ds.num_groups() as f64; ds.num_groups()];
    for tau in TEMPERATURES {
        u = prob.newton(u, Combine::Smooth(tau));
        pi = prob.combined(&u, Combine::Smooth(tau), false).3;
    }
    let value = prob.worst(&u);
    let dual_u = prob.newton(u.clone(), Combine::Fixed(&pi));
    let lower_bound = prob.combined(&dual_u, Combine::Fixed(&pi), false).0;
    debug!("reference value {value}, dual {lower_bound}");
    Ok(ReferenceOptimum {
        value,
        lower_bound,
        tolerance: (value - lower_bound).max(0.0),
        weights: pi,
        theta: Some(prob.to_params(&u)),
    })
}

/// Long-horizon subgradient descent on `max_g f_g` with `step0 / sqrt(t)`
/// steps, returning the best value seen and its parameters.
pub fn subgradient_reference(
    ds: &GroupedDataset,
    ambiguity: &AmbiguityConfig,
    iterations: u64,
    step0: f64,
) -> Result<(f64, ModelParams)> {
    ReducedProblem::new(ds, ambiguity)?;
    let groups = ds.rows_by_group();
    let mut theta = ModelParams::linear_zeros(ds.dim(), 2);
    let mut best = (f64::INFINITY, theta.clone());
    for t in 1..=iterations {
        let mut worst = (f64::NEG_INFINITY, 0);
        let mut values = Vec::with_capacity(groups.len());
        for (g, rows) in groups.iter().enumerate() {
            let mut v = 0.0;
            for &i in rows {
                v += ambiguity::binary_robust_loss(&theta, ds.row(i), ds.labels()[i], ambiguity.radius_of(g))?.value;
            }
            let v = v / rows.len() as f64;
            values.push(v);
            if v > worst.0 {
                worst = (v, g);
            }
        }
        if worst.0 < best.0 {
            best = (worst.0, theta.clone());
        }
        let g = worst.1;
        let mut sub = theta.zeros_like();
        for &i in &groups[g] {
            let x = ds.row(i);
            let y = ds.labels()[i];
            let z_star = ambiguity::binary_robust_loss(&theta, x, y, ambiguity.radius_of(g))?.argmax;
            sub.axpy(
                1.0 / groups[g].len() as f64,
                &theta.grad_wrt_params(&z_star, x, y, FeaturePath::Detached)?,
            );
        }
        theta.axpy(-step0 / (t as f64).sqrt(), &sub);
    }
    Ok(best)
}

/// `max_g f_g(theta_bar) - reference`; may dip below zero by the reference tolerance.
pub fn duality_gap(
    theta_bar: &ModelParams,
    ds: &GroupedDataset,
    ambiguity: &AmbiguityConfig,
    reference: &ReferenceOptimum,
) -> Result<f64> {
    require_convex(theta_bar)?;
    Ok(objective_value(theta_bar, ds, ambiguity)?.worst - reference.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub m: usize,
    pub b_theta: f64,
    pub b_grad: f64,
    pub b_loss: f64,
}

impl BoundConstants {
    /// `2 m sqrt(10 (B_theta^2 B_grad^2 + B_loss^2 log m) / T)`.
    pub fn bound(&self, horizon: u64) -> f64 {
        let m = self.m as f64;
        let inner = self.b_theta.powi(2) * self.b_grad.powi(2) + self.b_loss.powi(2) * m.ln();
        2.0 * m * (10.0 * inner / horizon as f64).sqrt()
    }
}

/// Empirical trajectory maxima of parameter norm, gradient norm and loss.
pub fn bound_constants(num_groups: usize, stats: &TrajectoryStats) -> BoundConstants {
    BoundConstants {
        m: num_groups,
        b_theta: stats.max_theta_norm,
        b_grad: stats.max_grad_norm,
        b_loss: stats.max_loss,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonSteps {
    /// Constant steps `eta / sqrt(T)` for horizon `T`.
    #[default]
    HorizonScaled,
    /// `eta / sqrt(t)` at iteration `t`.
    Decaying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub horizons: Vec<u64>,
    pub seeds: Vec<u64>,
    pub eta_theta: f64,
    pub eta_beta: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub steps: HorizonSteps,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            horizons: vec![20_000, 80_000, 320_000],
            seeds: (0..8).collect(),
            eta_theta: 40.0,
            eta_beta: 20.0,
            batch_size: 8,
            steps: HorizonSteps::HorizonScaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub horizon: u64,
    /// Seed-mean gap of the average iterate.
    pub gap: f64,
    pub gap_per_seed: Vec<f64>,
    /// Constants maximized over seeds.
    pub constants: BoundConstants,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub reference: ReferenceOptimum,
    pub horizons: Vec<HorizonResult>,
    /// `gap(4T) / gap(T)` for consecutive horizons that differ by 4x.
    pub ratios: Vec<(u64, f64)>,
}

impl ConvergenceReport {
    pub fn bound_respected(&self) -> bool {
        self.horizons.iter().all(|h| h.gap <= h.bound)
    }
}

/// Small 4-group spurious dataset used for rate checks.
pub fn canonical_instance(seed: u64) -> Result<(GroupedDataset, AmbiguityConfig)> {
    let ds = make_spurious(
        &SpuriousRecipe {
            n_per_group: vec![40, 16, 10, 40],
            spurious_strength: 0.8,
            noise_sd: 0.7,
            label_flip_p: 0.1,
        },
        seed,
    )?;
    let amb = exact_ascent(AmbiguityConfig::new(1.0, ds.group_sizes())?)?;
    Ok((ds, amb))
}

/// A latent step large enough that one projected step always lands on the
/// exact two-class maximizer.
pub fn exact_ascent(amb: AmbiguityConfig) -> Result<AmbiguityConfig> {
    let top = amb.per_group_radius.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(amb);
    }
    amb.with_eta_z(Some(1e12 * top))
}

/// Trains the hierarchical solver from zero at each horizon and seed and
/// measures the gap of the average iterate against the reference.
pub fn convergence_study(
    ds: &GroupedDataset,
    ambiguity: &AmbiguityConfig,
    config: &StudyConfig,
) -> Result<ConvergenceReport> {
    if config.horizons.is_empty() || config.seeds.is_empty() {
        return Err(HdroError::param("horizons", "horizons and seeds must be nonempty"));
    }
    let reference = reference_minmax(ds, ambiguity)?;
    let cells: Vec<(u64, u64)> = config
        .horizons
        .iter()
        .flat_map(|&h| config.seeds.iter().map(move |&s| (h, s)))
        .collect();
    let runs: Vec<(f64, TrajectoryStats)> = cells
        .par_iter()
        .map(|&(horizon, seed)| {
            let mut solver = SolverConfig::new(Mode::Hierarchical);
            solver.sampling = Sampling::GroupUniform;
            solver.iterations = horizon;
            solver.batch_size = config.batch_size;
            solver.seed = seed;
            match config.steps {
                HorizonSteps::HorizonScaled => {
                    let s = (horizon as f64).sqrt();
                    solver.eta_theta = config.eta_theta / s;
                    solver.eta_beta = config.eta_beta / s;
                    solver.step_schedule = StepSchedule::Constant;
                }
                HorizonSteps::Decaying => {
                    solver.eta_theta = config.eta_theta;
                    solver.eta_beta = config.eta_beta;
                    solver.step_schedule = StepSchedule::InvSqrt;
                }
            }
            let init = ModelParams::linear_zeros(ds.dim(), 2);
            let state = train(ds, None, init, &solver, ambiguity)?.final_state;
            let gap = duality_gap(&state.theta_bar, ds, ambiguity, &reference)?;
            Ok((gap, state.stats))
        })
        .collect::<Result<_>>()?;
    let k = config.seeds.len();
    let horizons: Vec<HorizonResult> = config
        .horizons
        .iter()
        .enumerate()
        .map(|(h, &horizon)| {
            let chunk = &runs[h * k..(h + 1) * k];
            let gap_per_seed: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let mut stats = TrajectoryStats::default();
            for (_, s) in chunk {
                stats.max_theta_norm = stats.max_theta_norm.max(s.max_theta_norm);
                stats.max_grad_norm = stats.max_grad_norm.max(s.max_grad_norm);
                stats.max_loss = stats.max_loss.max(s.max_loss);
            }
            let constants = bound_constants(ds.num_groups(), &stats);
            debug!("horizon {horizon}: gaps {gap_per_seed:?}");
            HorizonResult {
                horizon,
                gap: linalg::mean(&gap_per_seed),
                gap_per_seed,
                bound: constants.bound(horizon),
                constants,
            }
        })
        .collect();
    let ratios = horizons
        .windows(2)
        .filter(|w| w[1].horizon == 4 * w[0].horizon)
        .map(|w| (w[0].horizon, w[1].gap / w[0].gap))
        .collect();
    Ok(ConvergenceReport {
        reference,
        horizons,
        ratios,
    })
}
