//! Radius selection by minority-group accuracy on rank-based holdouts.
//!
//! Training rows are ordered along one dimension, each group is cut into five
//! quantiles, and two holdout setups are formed: one holding out the top
//! quantile of every group, the other the bottom quantile. Every grid
//! candidate is trained on both 80% splits and scored by the minority group's
//! holdout accuracy.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambiguity::AmbiguityConfig;
use crate::datagen::GroupedDataset;
use crate::error::{HdroError, Result};
use crate::eval::evaluate;
use crate::linalg;
use crate::model::{Architecture, ModelSpec};
use crate::solver::{train, Mode, SolverConfig};

/// Numerators of the default grid; each is divided by 255 and scaled by
/// `sqrt(n_min)`.
pub const DEFAULT_GRID_NUMERATORS: [f64; 8] = [12.0, 24.0, 36.0, 48.0, 60.0, 72.0, 84.0, 96.0];

pub const POWER_ITERATIONS: usize = 200;

pub const NUM_QUANTILES: usize = 5;

/// `{12, 24, ..., 96} / 255`.
pub fn default_grid_scale() -> Vec<f64> {
    DEFAULT_GRID_NUMERATORS.iter().map(|k| k / 255.0).collect()
}

/// Default candidates: `default_grid_scale() * sqrt(n_min)`.
pub fn default_grid(n_min: usize) -> Vec<f64> {
    let s = (n_min as f64).sqrt();
    default_grid_scale().into_iter().map(|c| c * s).collect()
}

/// One-dimensional scores for the rows of an `n x d` row-major matrix.
pub trait Projector: Sync {
    fn project(&self, features: &[f64], n: usize, d: usize) -> Result<Projection>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub scores: Vec<f64>,
    /// Set when no direction separates the rows (all features constant).
    pub degenerate: bool,
}

/// Leading principal component by power iteration on the sample covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalAxis {
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PrincipalAxis {
    fn default() -> Self {
        Self {
            iterations: POWER_ITERATIONS,
            seed: 0,
        }
    }
}

impl Projector for PrincipalAxis {
    fn project(&self, features: &[f64], n: usize, d: usize) -> Result<Projection> {
        if features.len() != n * d {
            return Err(HdroError::Shape {
                context: "feature matrix",
                expected: n * d,
                got: features.len(),
            });
        }
        let row = |i: usize| &features[i * d..(i + 1) * d];
        let mut mean = vec![0.0; d];
        for i in 0..n {
            linalg::axpy(1.0 / n as f64, row(i), &mut mean);
        }
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let c = linalg::sub(row(i), &mean);
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += c[a] * c[b];
                }
            }
        }
        let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
        let scale: f64 = features.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if trace <= 1e-24 * scale * scale * n as f64 {
            return Ok(Projection {
                scores: vec![0.0; n],
                degenerate: true,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..self.iterations {
            let w: Vec<f64> = (0..d).map(|a| linalg::dot(&cov[a * d..(a + 1) * d], &v)).collect();
            let norm = linalg::norm(&w);
            if norm == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        let mut scores: Vec<f64> = (0..n).map(|i| linalg::dot(&linalg::sub(row(i), &mean), &v)).collect();
        // Orientation: positive covariance with coordinate 0, else the first
        // nonzero loading positive.
        let cov0: f64 = (0..n).map(|i| scores[i] * (row(i)[0] - mean[0])).sum();
        let flip = if cov0.abs() > 1e-12 * trace {
            cov0 < 0.0
        } else {
            v.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0)
        };
        if flip {
            scores.iter_mut().for_each(|s| *s = -*s);
        }
        Ok(Projection {
            scores,
            degenerate: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    /// `ranks[i]` is the position of row `i` in ascending score order.
    pub ranks: Vec<usize>,
    pub degenerate: bool,
}

/// Ranks under the default principal-axis projector.
pub fn order_1d(features: &[f64], n: usize, d: usize) -> Result<Ordering> {
    order_with(&PrincipalAxis::default(), features, n, d)
}

/// Ranks by projected score, ties broken by row index. A degenerate
/// projection falls back to index order.
pub fn order_with(projector: &dyn Projector, features: &[f64], n: usize, d: usize) -> Result<Ordering> {
    if n < 2 {
        return Err(HdroError::param("n", format!("need at least 2 rows, got {n}")));
    }
    let proj = projector.project(features, n, d)?;
    let mut idx: Vec<usize> = (0..n).collect();
    if !proj.degenerate {
        idx.sort_by(|&a, &b| proj.scores[a].total_cmp(&proj.scores[b]).then(a.cmp(&b)));
    }
    let mut ranks = vec![0; n];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r;
    }
    Ok(Ordering {
        ranks,
        degenerate: proj.degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutSetup {
    /// Top quantile held out.
    Top,
    /// Bottom quantile held out.
    Bottom,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub setup: HoldoutSetup,
    pub train_rows: Vec<usize>,
    pub holdout_rows: Vec<usize>,
}

/// Boundaries `ceil(k n / 5)` for `k = 0..=5`; group of 7 gives sizes (2,1,2,1,1).
pub fn quantile_bounds(n: usize) -> [usize; NUM_QUANTILES + 1] {
    let mut b = [0; NUM_QUANTILES + 1];
    for (k, slot) in b.iter_mut().enumerate() {
        *slot = (k * n).div_ceil(NUM_QUANTILES);
    }
    b
}

/// The two holdout setups (top quantile, bottom quantile) per group.
pub fn quantile_splits(ds: &GroupedDataset, ranks: &[usize]) -> Result<[Split; 2]> {
    if ranks.len() != ds.len() {
        return Err(HdroError::Shape {
            context: "ranks",
            expected: ds.len(),
            got: ranks.len(),
        });
    }
    let mut top = Split {
        setup: HoldoutSetup::Top,
        train_rows: Vec::new(),
        holdout_rows: Vec::new(),
    };
    let mut bottom = Split {
        setup: HoldoutSetup::Bottom,
        train_rows: Vec::new(),
        holdout_rows: Vec::new(),
    };
    for (g, mut members) in ds.rows_by_group().into_iter().enumerate() {
        if members.len() < NUM_QUANTILES {
            return Err(HdroError::TuningInfeasible {
                group: g,
                size: members.len(),
            });
        }
        members.sort_by_key(|&i| (ranks[i], i));
        let b = quantile_bounds(members.len());
        top.train_rows.extend_from_slice(&members[..b[4]]);
        top.holdout_rows.extend_from_slice(&members[b[4]..]);
        bottom.holdout_rows.extend_from_slice(&members[..b[1]]);
        bottom.train_rows.extend_from_slice(&members[b[1]..]);
    }
    for s in [&mut top, &mut bottom] {
        s.train_rows.sort_unstable();
        s.holdout_rows.sort_unstable();
    }
    Ok([top, bottom])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

impl Aggregation {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Aggregation::Mean => 0.5 * (a + b),
            Aggregation::Min => a.min(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingSource {
    /// Latents of a briefly ERM-trained model (raw features for linear models).
    #[default]
    WarmupLatents,
    RawFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub model: ModelSpec,
    /// Solver settings for every candidate run; the mode is forced to hierarchical.
    pub solver: SolverConfig,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default)]
    pub eta_z: Option<f64>,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub ordering: OrderingSource,
    #[serde(default = "default_warmup")]
    pub warmup_iterations: u64,
    /// Seeds model initialization, warm-up and projection.
    #[serde(default)]
    pub seed: u64,
}

fn default_inner_steps() -> usize {
    1
}

fn default_warmup() -> u64 {
    500
}

impl TuneConfig {
    pub fn new(model: ModelSpec, solver: SolverConfig) -> Self {
        Self {
            model,
            solver,
            inner_steps: 1,
            eta_z: None,
            aggregation: Aggregation::Mean,
            ordering: OrderingSource::WarmupLatents,
            warmup_iterations: default_warmup(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub grid: Vec<f64>,
    /// Minority-group holdout accuracy with the top quantile held out.
    pub top_holdout_acc: Vec<f64>,
    /// Minority-group holdout accuracy with the bottom quantile held out.
    pub bottom_holdout_acc: Vec<f64>,
    pub aggregate: Vec<f64>,
    pub aggregation: Aggregation,
    pub chosen_epsilon: f64,
    pub minority_group: usize,
    pub degenerate_ordering: bool,
}

/// Index of the best aggregate; ties go to the smallest epsilon.
pub fn select_candidate(grid: &[f64], aggregate: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..grid.len() {
        let better = aggregate[i] > aggregate[best] || (aggregate[i] == aggregate[best] && grid[i] < grid[best]);
        if better {
            best = i;
        }
    }
    best
}

fn ordering_features(ds: &GroupedDataset, config: &TuneConfig) -> Result<Vec<f64>> {
    if config.ordering == OrderingSource::RawFeatures || config.model.architecture == Architecture::Linear {
        return Ok(ds.features().to_vec());
    }
    let mut warm = SolverConfig::new(Mode::Erm);
    warm.iterations = config.warmup_iterations;
    warm.batch_size = config.solver.batch_size;
    warm.eta_theta = config.solver.eta_theta;
    warm.seed = config.seed;
    let init = config.model.build(ds.dim(), ds.num_labels(), config.seed);
    let amb = AmbiguityConfig::new(0.0, ds.group_sizes())?;
    let theta = train(ds, None, init, &warm, &amb)?.final_state.theta;
    let mut out = Vec::with_capacity(ds.len() * theta.latent_dim());
    for i in 0..ds.len() {
        out.extend(theta.latent(ds.row(i))?);
    }
    Ok(out)
}

fn minority_holdout_accuracy(
    ds: &GroupedDataset,
    split: &Split,
    epsilon: f64,
    minority: usize,
    config: &TuneConfig,
) -> Result<f64> {
    let train_set = ds.subset(&split.train_rows);
    let holdout: Vec<usize> = split
        .holdout_rows
        .iter()
        .copied()
        .filter(|&i| ds.group_of()[i] == minority)
        .collect();
    let holdout_set = ds.subset(&holdout);
    let amb = AmbiguityConfig::new(epsilon, train_set.group_sizes())?
        .with_inner_steps(config.inner_steps)?
        .with_eta_z(config.eta_z)?;
    let mut solver = config.solver.clone();
    solver.mode = Mode::Hierarchical;
    let init = config.model.build(ds.dim(), ds.num_labels(), config.seed);
    let theta = train(&train_set, None, init, &solver, &amb)?.final_state.theta;
    let report = evaluate(&theta, &holdout_set, train_set.proportions())?;
    Ok(report.per_group_acc[minority])
}

/// Trains every candidate on both holdout setups (in parallel) and picks the
/// radius maximizing the aggregated minority-group holdout accuracy.
pub fn tune_epsilon(ds_train: &GroupedDataset, grid: &[f64], config: &TuneConfig) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(HdroError::param("grid", "must be nonempty"));
    }
    if let Some(bad) = grid.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(HdroError::param("grid", format!("invalid candidate {bad}")));
    }
    config.solver.validate()?;
    let minority = ds_train.minority_group();
    let features = ordering_features(ds_train, config)?;
    let d = features.len() / ds_train.len().max(1);
    let projector = PrincipalAxis {
        seed: config.seed,
        ..PrincipalAxis::default()
    };
    let ordering = order_with(&projector, &features, ds_train.len(), d)?;
    let splits = quantile_splits(ds_train, &ordering.ranks)?;

    let cells: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| [(c, 0), (c, 1)]).collect();
    let accs: Vec<f64> = cells
        .par_iter()
        .map(|&(c, s)| minority_holdout_accuracy(ds_train, &splits[s], grid[c], minority, config))
        .collect::<Result<_>>()?;
    let top_holdout_acc: Vec<f64> = accs.iter().step_by(2).copied().collect();
    let bottom_holdout_acc: Vec<f64> = accs.iter().skip(1).step_by(2).copied().collect();
    let aggregate: Vec<f64> = top_holdout_acc
        .iter()
        .zip(&bottom_holdout_acc)
        .map(|(&a, &b)| config.aggregation.apply(a, b))
        .collect();
    let chosen = select_candidate(grid, &aggregate);
    Ok(TuneResult {
        grid: grid.to_vec(),
        top_holdout_acc,
        bottom_holdout_acc,
        aggregate,
        aggregation: config.aggregation,
        chosen_epsilon: grid[chosen],
        minority_group: minority,
        degenerate_ordering: ordering.degenerate,
    })
}

/// CSV table: `epsilon, top_holdout_acc, bottom_holdout_acc, aggregate, chosen`.
pub fn write_tune_table<W: Write>(result: &TuneResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "epsilon,top_holdout_acc,bottom_holdout_acc,aggregate,chosen")?;
    for i in 0..result.grid.len() {
        writeln!(
            out,
            "{},{},{},{},{}",
            result.grid[i],
            result.top_holdout_acc[i],
            result.bottom_holdout_acc[i],
            result.aggregate[i],
            u8::from(result.grid[i] == result.chosen_epsilon)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_twelve_steps_over_255() {
        let g = default_grid(100);
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 12.0 / 255.0 * 10.0);
        assert_eq!(g[7], 96.0 / 255.0 * 10.0);
    }

    #[test]
    fn quantiles_of_five_and_seven() {
        assert_eq!(quantile_bounds(5), [0, 1, 2, 3, 4, 5]);
        let b = quantile_bounds(7);
        let sizes: Vec<usize> = b.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(sizes, vec![2, 1, 2, 1, 1]);
    }

    #[test]
    fn one_dimensional_features_sort_directly() {
        let x = [3.0, -1.0, 2.0, 0.5];
        let o = order_1d(&x, 4, 1).unwrap();
        assert_eq!(o.ranks, vec![3, 0, 2, 1]);
    }

    #[test]
    fn constant_features_fall_back_to_index_order() {
        let o = order_1d(&[1.0; 8], 4, 2).unwrap();
        assert!(o.degenerate);
        assert_eq!(o.ranks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_go_to_smaller_epsilon() {
        assert_eq!(select_candidate(&[0.3, 0.1, 0.2], &[0.5, 0.5, 0.4]), 1);
        assert_eq!(select_candidate(&[0.3], &[0.0]), 0);
    }

    #[test]
    fn small_group_is_infeasible() {
        let ds = GroupedDataset::new(
            1,
            2,
            2,
            (0..9).map(f64::from).collect(),
            vec![0, 0, 0, 0, 0, 1, 1, 1, 1],
            vec![0, 0, 0, 0, 0, 0, 0, 0, 1],
        )
        .unwrap();
        let ranks: Vec<usize> = (0..9).collect();
        assert!(matches!(
            quantile_splits(&ds, &ranks),
            Err(HdroError::TuningInfeasible { group: 1, size: 0 })
        ));
    }
}
