//! The minimax training loop.
//!
//! Each iteration samples one group `g` and a with-replacement minibatch from
//! it, then updates in order:
//!
//! 1. latent ascent: `z' <- Proj_{||z' - z(x)|| <= eps_g}(z(x) + eta_z grad_z loss)`;
//! 2. group weights: `beta_g <- beta_g exp(eta_beta (loss + C / sqrt(n_g)))`,
//!    then renormalize;
//! 3. parameters: `theta <- theta - eta_theta beta_g grad_theta loss(z')`.
//!
//! Group DRO is the same path with every radius forced to zero. ERM freezes
//! `beta` at the training proportions, skips the perturbation and takes plain
//! stochastic gradient steps.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{self, AmbiguityConfig};
use crate::datagen::GroupedDataset;
use crate::error::{check_len, HdroError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{FeaturePath, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Erm,
    GroupDro,
    Hierarchical,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Erm => "erm",
            Mode::GroupDro => "group_dro",
            Mode::Hierarchical => "hierarchical",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `g ~ Uniform(groups)`.
    GroupUniform,
    /// `g ~ alpha`, i.e. rows at their empirical frequency.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// Both step sizes scaled by `1 / sqrt(t)`.
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub mode: Mode,
    pub eta_beta: f64,
    pub eta_theta: f64,
    /// Generalization adjustment `C`; enters only the weight update.
    #[serde(default)]
    pub adjustment_c: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub average_iterates: bool,
    /// Validation checkpoint period; 0 means only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub step_schedule: StepSchedule,
    #[serde(default)]
    pub feature_path: FeaturePath,
}

fn default_true() -> bool {
    true
}

impl SolverConfig {
    /// Defaults for a mode: ERM samples rows empirically, the robust modes
    /// sample groups uniformly.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            eta_beta: 0.01,
            eta_theta: 0.1,
            adjustment_c: 0.0,
            iterations: 1000,
            batch_size: 32,
            sampling: match mode {
                Mode::Erm => Sampling::Empirical,
                _ => Sampling::GroupUniform,
            },
            seed: 0,
            average_iterates: true,
            checkpoint_every: 0,
            step_schedule: StepSchedule::Constant,
            feature_path: FeaturePath::Detached,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(HdroError::param(name, format!("must be positive, got {v}")))
            }
        };
        positive("eta_beta", self.eta_beta)?;
        positive("eta_theta", self.eta_theta)?;
        if !(self.adjustment_c >= 0.0) || !self.adjustment_c.is_finite() {
            return Err(HdroError::param("adjustment_c", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(HdroError::param("batch_size", "must be positive"));
        }
        Ok(())
    }

    fn steps_at(&self, t: u64) -> (f64, f64) {
        match self.step_schedule {
            StepSchedule::Constant => (self.eta_theta, self.eta_beta),
            StepSchedule::InvSqrt => {
                let s = 1.0 / (t as f64).sqrt();
                (self.eta_theta * s, self.eta_beta * s)
            }
        }
    }
}

/// Running maxima along the trajectory, for the convergence bound.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub max_theta_norm: f64,
    pub max_grad_norm: f64,
    pub max_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub t: u64,
    /// Last observed batch-mean (perturbed) loss per group; `NaN` if unseen.
    pub group_loss: Vec<f64>,
    pub beta: Vec<f64>,
    pub val_worst_acc: Option<f64>,
    pub val_avg_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: ModelParams,
    pub beta: Vec<f64>,
    /// Uniform average of the post-step iterates (equals `theta` at `t = 0`).
    pub theta_bar: ModelParams,
    pub t: u64,
    pub last_group_loss: Vec<f64>,
    pub stats: TrajectoryStats,
    pub history: Vec<CheckpointRecord>,
}

impl TrainState {
    /// Fresh state: uniform weights for the robust modes, training proportions for ERM.
    pub fn new(theta: ModelParams, mode: Mode, proportions: &[f64]) -> Self {
        let m = proportions.len();
        let beta = match mode {
            Mode::Erm => proportions.to_vec(),
            _ => vec![1.0 / m as f64; m],
        };
        Self {
            theta_bar: theta.clone(),
            stats: TrajectoryStats {
                max_theta_norm: theta.norm(),
                ..Default::default()
            },
            theta,
            beta,
            t: 0,
            last_group_loss: vec![f64::NAN; m],
            history: Vec::new(),
        }
    }
}

/// Group-homogeneous minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub group: usize,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub group: usize,
    /// Batch-mean loss at the perturbed latents.
    pub loss: f64,
}

fn divergence(t: u64, reason: impl Into<String>, beta: &[f64], theta: &ModelParams) -> HdroError {
    HdroError::Divergence {
        iteration: t,
        reason: reason.into(),
        snapshot: format!("beta = {beta:?}, |theta| = {}", theta.norm()),
    }
}

/// Exponentiated-gradient step on coordinate `g` of the simplex weights,
/// computed in a form that cannot overflow.
pub fn update_beta(
    beta: &[f64],
    g: usize,
    loss_value: f64,
    eta_beta: f64,
    adjustment_c: f64,
    group_size: usize,
) -> Result<Vec<f64>> {
    if !loss_value.is_finite() {
        return Err(HdroError::Divergence {
            iteration: 0,
            reason: format!("non-finite loss {loss_value} for group {g}"),
            snapshot: format!("beta = {beta:?}"),
        });
    }
    if g >= beta.len() {
        return Err(HdroError::param("g", format!("{g} >= {}", beta.len())));
    }
    if group_size == 0 {
        return Err(HdroError::param("n_g", "group size must be positive"));
    }
    let exponent = eta_beta * (loss_value + adjustment_c / (group_size as f64).sqrt());
    if exponent == 0.0 {
        return Ok(beta.to_vec());
    }
    let rest: f64 = beta.iter().enumerate().filter(|&(j, _)| j != g).map(|(_, &b)| b).sum();
    // Divide through by exp(max(exponent, 0)) so nothing exceeds 1.
    let (scale_g, scale_rest) = if exponent > 0.0 {
        (1.0, (-exponent).exp())
    } else {
        (exponent.exp(), 1.0)
    };
    let total = beta[g] * scale_g + rest * scale_rest;
    let mut out: Vec<f64> = beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            if j == g {
                b * scale_g / total
            } else {
                b * scale_rest / total
            }
        })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|b| *b /= sum);
    Ok(out)
}

/// Draws the group, then `batch_size` rows of it with replacement.
pub fn sample_batch<R: Rng>(
    rng: &mut R,
    config: &SolverConfig,
    rows_by_group: &[Vec<usize>],
    proportions: &[f64],
) -> Batch {
    let m = rows_by_group.len();
    let group = match config.sampling {
        Sampling::GroupUniform => rng.random_range(0..m),
        Sampling::Empirical => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (g, &p) in proportions.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = g;
                    break;
                }
            }
            chosen
        }
    };
    let members = &rows_by_group[group];
    let rows = (0..config.batch_size)
        .map(|_| members[rng.random_range(0..members.len())])
        .collect();
    Batch { group, rows }
}

/// One iteration on a group-homogeneous batch.
pub fn train_step(
    state: &mut TrainState,
    ds: &GroupedDataset,
    batch: &Batch,
    config: &SolverConfig,
    ambiguity: &AmbiguityConfig,
) -> Result<StepRecord> {
    let g = batch.group;
    if batch.rows.is_empty() {
        return Err(HdroError::param("batch", "empty minibatch"));
    }
    if let Some(&bad) = batch.rows.iter().find(|&&i| ds.group_of()[i] != g) {
        return Err(HdroError::param("batch", format!("row {bad} is not in group {g}")));
    }
    let t = state.t + 1;
    let (eta_theta, eta_beta) = config.steps_at(t);
    let eps_g = match config.mode {
        Mode::Hierarchical => ambiguity.radius_of(g),
        Mode::GroupDro | Mode::Erm => 0.0,
    };
    let theta = &state.theta;

    let mut loss_sum = 0.0;
    let mut grad_sum = theta.zeros_like();
    for &i in &batch.rows {
        let x = ds.row(i);
        let y = ds.labels()[i];
        let z = theta.latent(x)?;
        let z_prime = if eps_g > 0.0 {
            ambiguity::inner_maximize(theta, &z, y, eps_g, ambiguity.inner_steps, ambiguity.eta_z_for(g))?
        } else {
            z
        };
        let loss = theta.loss_at_latent(&z_prime, y)?;
        let grad = theta.grad_wrt_params(&z_prime, x, y, config.feature_path)?;
        state.stats.max_loss = state.stats.max_loss.max(loss);
        state.stats.max_grad_norm = state.stats.max_grad_norm.max(grad.norm());
        loss_sum += loss;
        grad_sum.axpy(1.0, &grad);
    }
    let batch_len = batch.rows.len() as f64;
    let loss = loss_sum / batch_len;
    grad_sum.scale(1.0 / batch_len);
    if !loss.is_finite() || !grad_sum.is_finite() {
        return Err(divergence(t, "non-finite loss or gradient", &state.beta, &state.theta));
    }

    let weight = match config.mode {
        Mode::Erm => 1.0,
        Mode::GroupDro | Mode::Hierarchical => {
            state.beta = update_beta(&state.beta, g, loss, eta_beta, config.adjustment_c, ds.group_sizes()[g])
                .map_err(|_| divergence(t, "non-finite weight update", &state.beta, &state.theta))?;
            state.beta[g]
        }
    };

    state.theta.axpy(-eta_theta * weight, &grad_sum);
    if !state.theta.is_finite() {
        return Err(divergence(t, "non-finite parameters", &state.beta, &state.theta));
    }
    state.t = t;
    if config.average_iterates {
        let mut delta = state.theta.clone();
        delta.axpy(-1.0, &state.theta_bar);
        state.theta_bar.axpy(1.0 / t as f64, &delta);
    }
    state.stats.max_theta_norm = state.stats.max_theta_norm.max(state.theta.norm());
    state.last_group_loss[g] = loss;
    Ok(StepRecord { group: g, loss })
}

/// The checkpoint picked by worst-group validation accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedModel {
    pub t: u64,
    pub theta: ModelParams,
    pub val_report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_state: TrainState,
    pub selected: SelectedModel,
}

fn check_compatible(ds: &GroupedDataset, theta: &ModelParams, ambiguity: &AmbiguityConfig) -> Result<()> {
    check_len("model input dimension", ds.dim(), theta.input_dim())?;
    check_len("model class count", ds.num_labels(), theta.num_classes())?;
    check_len("ambiguity radii", ds.num_groups(), ambiguity.num_groups())
}

/// Runs `config.iterations` steps. With a validation set, every
/// `checkpoint_every` iterations (and at the end) the worst-group validation
/// accuracy is recorded and the best checkpoint is kept; ties go to the later
/// checkpoint.
pub fn train(
    ds_train: &GroupedDataset,
    ds_val: Option<&GroupedDataset>,
    model_init: ModelParams,
    config: &SolverConfig,
    ambiguity: &AmbiguityConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    ds_train.require_all_groups()?;
    check_compatible(ds_train, &model_init, ambiguity)?;
    if let Some(val) = ds_val {
        check_len("validation dimension", ds_train.dim(), val.dim())?;
    }
    let rows_by_group = ds_train.rows_by_group();
    let proportions = ds_train.proportions().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::new(model_init, config.mode, &proportions);
    let mut selected = SelectedModel {
        t: 0,
        theta: state.theta.clone(),
        val_report: None,
    };
    let period = if config.checkpoint_every == 0 {
        config.iterations
    } else {
        config.checkpoint_every
    };
    for t in 1..=config.iterations {
        let batch = sample_batch(&mut rng, config, &rows_by_group, &proportions);
        train_step(&mut state, ds_train, &batch, config, ambiguity)?;
        if t % period == 0 || t == config.iterations {
            let report = match ds_val {
                Some(val) => Some(evaluate(&state.theta, val, &proportions)?),
                None => None,
            };
            state.history.push(CheckpointRecord {
                t,
                group_loss: state.last_group_loss.clone(),
                beta: state.beta.clone(),
                val_worst_acc: report.as_ref().map(|r| r.worst_group_acc),
                val_avg_acc: report.as_ref().map(|r| r.avg_acc_weighted),
            });
            let better = match (&report, &selected.val_report) {
                (Some(new), Some(old)) => new.worst_group_acc >= old.worst_group_acc,
                _ => true,
            };
            if better {
                selected = SelectedModel {
                    t,
                    theta: state.theta.clone(),
                    val_report: report,
                };
            }
        }
    }
    Ok(TrainOutcome {
        final_state: state,
        selected,
    })
}

/// Per-group robust losses `f_g` and their maximum over the simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveValue {
    /// `NaN` for groups absent from the dataset.
    pub per_group: Vec<f64>,
    pub worst: f64,
}

/// `f_g(theta) = mean over group g of sup_{||z' - z(x)|| <= eps_g} loss(z')`.
///
/// Two-class models use the closed form; otherwise the supremum comes from
/// multi-start ascent on the sphere.
pub fn objective_value(
    theta: &ModelParams,
    ds: &GroupedDataset,
    ambiguity: &AmbiguityConfig,
) -> Result<ObjectiveValue> {
    check_compatible(ds, theta, ambiguity)?;
    let m = ds.num_groups();
    let mut sums = vec![0.0; m];
    for i in 0..ds.len() {
        let g = ds.group_of()[i];
        sums[g] += robust_example_loss(theta, ds.row(i), ds.labels()[i], ambiguity.radius_of(g))?.value;
    }
    let per_group: Vec<f64> = sums
        .iter()
        .zip(ds.group_sizes())
        .map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();
    let worst = per_group
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ObjectiveValue { per_group, worst })
}

/// Ball supremum of one example's loss around its latent.
pub fn robust_example_loss(theta: &ModelParams, x: &[f64], y: usize, eps: f64) -> Result<ambiguity::BallSup> {
    let z = theta.latent(x)?;
    if theta.num_classes() == 2 {
        ambiguity::binary_robust_loss(theta, &z, y, eps)
    } else {
        ambiguity::ball_supremum(theta, &z, y, eps)
    }
}

/// Writes checkpoint history as CSV:
/// `t, loss_g*, beta_g*, val_worst_acc, val_avg_acc`.
pub fn write_history_csv<W: Write>(history: &[CheckpointRecord], num_groups: usize, mut out: W) -> std::io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..num_groups).map(|g| format!("loss_g{g}")));
    header.extend((0..num_groups).map(|g| format!("beta_g{g}")));
    header.push("val_worst_acc".into());
    header.push("val_avg_acc".into());
    writeln!(out, "{}", header.join(","))?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for rec in history {
        let mut row = vec![rec.t.to_string()];
        row.extend(rec.group_loss.iter().map(|v| format!("{v:.8}")));
        row.extend(rec.beta.iter().map(|v| format!("{v:.8}")));
        row.push(opt(rec.val_worst_acc));
        row.push(opt(rec.val_avg_acc));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_spurious, SpuriousRecipe};
    use crate::model::Architecture;

    fn toy() -> GroupedDataset {
        make_spurious(
            &SpuriousRecipe {
                n_per_group: vec![30, 8, 6, 30],
                spurious_strength: 0.7,
                noise_sd: 0.6,
                label_flip_p: 0.0,
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn zero_loss_leaves_weights_alone() {
        let beta = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(update_beta(&beta, 2, 0.0, 0.5, 0.0, 10).unwrap(), beta);
    }

    #[test]
    fn exponentiated_update_by_hand() {
        let b = update_beta(&[0.5, 0.5], 1, 1.0, 2f64.ln(), 0.0, 7).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-15 && (b[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn adjustment_inflates_small_groups() {
        // C / sqrt(n_g) = 2 / 2 = 1 plays the role of the loss above
        let b = update_beta(&[0.5, 0.5], 1, 0.0, 2f64.ln(), 2.0, 4).unwrap();
        assert!((b[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_exponent_does_not_overflow() {
        let b = update_beta(&[0.25; 4], 0, 1e6, 10.0, 0.0, 1).unwrap();
        assert_eq!(b[0], 1.0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            update_beta(&[0.5, 0.5], 0, f64::NAN, 1.0, 0.0, 1),
            Err(HdroError::Divergence { .. })
        ));
    }

    #[test]
    fn zero_iterations_return_the_initial_state() {
        let ds = toy();
        let theta = ModelParams::init(Architecture::Linear, ds.dim(), 0, 2, 1);
        let mut cfg = SolverConfig::new(Mode::Hierarchical);
        cfg.iterations = 0;
        let amb = AmbiguityConfig::new(1.0, ds.group_sizes()).unwrap();
        let out = train(&ds, Some(&ds), theta.clone(), &cfg, &amb).unwrap();
        assert_eq!(out.final_state.theta, theta);
        assert_eq!(out.final_state.t, 0);
        assert_eq!(out.selected.theta, theta);
        assert!(out.final_state.history.is_empty());
    }

    #[test]
    fn empty_group_is_rejected_before_training() {
        let ds = toy();
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.group_of()[i] != 1).collect();
        let sub = ds.subset(&rows);
        let theta = ModelParams::linear_zeros(sub.dim(), 2);
        let amb = AmbiguityConfig::new(0.0, &[1, 1, 1, 1]).unwrap();
        let err = train(&sub, None, theta, &SolverConfig::new(Mode::GroupDro), &amb).unwrap_err();
        assert!(matches!(err, HdroError::InvalidDataset(_)));
    }

    #[test]
    fn erm_step_is_plain_sgd() {
        let ds = toy();
        let theta = ModelParams::init(Architecture::Linear, ds.dim(), 0, 2, 4);
        let cfg = SolverConfig::new(Mode::Erm);
        let amb = AmbiguityConfig::new(3.0, ds.group_sizes()).unwrap();
        let mut state = TrainState::new(theta.clone(), Mode::Erm, ds.proportions());
        let batch = Batch {
            group: 2,
            rows: ds.rows_by_group()[2][..3].to_vec(),
        };
        train_step(&mut state, &ds, &batch, &cfg, &amb).unwrap();
        let mut expected = theta.clone();
        for &i in &batch.rows {
            let g = theta
                .forward_with_grads(ds.row(i), ds.labels()[i])
                .unwrap()
                .grad_theta
                .unwrap();
            expected.axpy(-cfg.eta_theta / 3.0, &g);
        }
        assert!(crate::linalg::distance(&expected.to_flat(), &state.theta.to_flat()) < 1e-15);
        assert_eq!(state.beta, ds.proportions());
    }

    #[test]
    fn history_csv_has_one_row_per_checkpoint() {
        let ds = toy();
        let mut cfg = SolverConfig::new(Mode::GroupDro);
        cfg.iterations = 50;
        cfg.checkpoint_every = 20;
        let amb = AmbiguityConfig::new(0.0, ds.group_sizes()).unwrap();
        let out = train(&ds, Some(&ds), ModelParams::linear_zeros(ds.dim(), 2), &cfg, &amb).unwrap();
        let ts: Vec<u64> = out.final_state.history.iter().map(|h| h.t).collect();
        assert_eq!(ts, vec![20, 40, 50]);
        let mut buf = Vec::new();
        write_history_csv(&out.final_state.history, 4, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("t,loss_g0,loss_g1,loss_g2,loss_g3,beta_g0"));
    }

    #[test]
    fn zero_model_objective_is_ln2_for_any_radius() {
        let ds = toy();
        let theta = ModelParams::linear_zeros(ds.dim(), 2);
        for eps in [0.0, 0.5, 5.0] {
            let amb = AmbiguityConfig::new(eps, ds.group_sizes()).unwrap();
            let obj = objective_value(&theta, &ds, &amb).unwrap();
            assert!(obj.per_group.iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));
        }
    }
}
