//! Subcommand implementations. Each writes its artifacts under the config's
//! output directory and returns the structured result.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hdro::ambiguity::AmbiguityConfig;
use hdro::datagen::{self, apply_shift, make_spurious, GroupedDataset, ShiftSpec, ShiftTarget, SpuriousRecipe};
use hdro::eval::evaluate;
use hdro::linalg;
use hdro::solver::{train, write_history_csv, Mode};
use hdro::tuning::{default_grid_scale, tune_epsilon, write_tune_table, TuneResult};
use hdro::HdroError;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checks::{run_verify, LatentGradFn, VerifyLevel, VerifyReport};
use crate::config::{EpsilonSetting, ExperimentConfig};
use crate::error::{CliError, Result};

pub const RESULTS_HEADER: [&str; 7] = [
    "method",
    "seed",
    "eps",
    "worst_acc_orig",
    "avg_acc_orig",
    "worst_acc_shift",
    "avg_acc_shift",
];

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
    pub test_shifted: GroupedDataset,
}

fn split_seed(base: u64, k: u64) -> u64 {
    base.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn shifted(ds: GroupedDataset, shifts: &[ShiftSpec], target: ShiftTarget) -> Result<GroupedDataset> {
    let mut ds = ds;
    for s in shifts.iter().filter(|s| s.applies_to == target) {
        s.validate(ds.num_groups(), ds.dim())?;
        let out = apply_shift(&ds, s)?;
        if let Some(w) = out.warning {
            warn!("{w}");
        }
        ds = out.dataset;
    }
    Ok(ds)
}

/// Builds (or loads) the four splits. Training-time shifts apply to train and
/// validation; test-time shifts produce `test_shifted` from `test`.
pub fn load_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let shifts = &config.dataset.shifts;
    let (train, val, test, explicit_shifted) = if let Some(g) = &config.dataset.generator {
        let with_sizes = |n: &Vec<usize>| SpuriousRecipe {
            n_per_group: n.clone(),
            ..g.train.clone()
        };
        (
            make_spurious(&g.train, split_seed(g.seed, 0))?,
            make_spurious(&with_sizes(&g.val_per_group), split_seed(g.seed, 1))?,
            make_spurious(&with_sizes(&g.test_per_group), split_seed(g.seed, 2))?,
            None,
        )
    } else if let Some(c) = &config.dataset.csv {
        let load = |p: &PathBuf| datagen::load_csv_with(p, c.num_labels, c.num_attributes);
        (
            load(&c.train)?,
            load(&c.val)?,
            load(&c.test)?,
            c.test_shifted.as_ref().map(load).transpose()?,
        )
    } else {
        return Err(CliError::Config("dataset needs a generator or csv block".into()));
    };
    let test_shifted = match explicit_shifted {
        Some(ds) => ds,
        None => shifted(test.clone(), shifts, ShiftTarget::Test)?,
    };
    Ok(Datasets {
        train: shifted(train, shifts, ShiftTarget::Train)?,
        val: shifted(val, shifts, ShiftTarget::Train)?,
        test,
        test_shifted,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Header comment lines carried by every CSV artifact.
fn provenance(config: &ExperimentConfig) -> String {
    let seeds: Vec<String> = config.seeds.iter().map(u64::to_string).collect();
    format!("# config_hash: {}\n# seeds: {}\n", config.hash(), seeds.join(","))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
    pub group_sizes: Vec<usize>,
    /// `None` for groups without rows.
    pub group_means: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub shifts: Vec<ShiftSpec>,
    pub files: BTreeMap<String, FileEntry>,
}

/// Writes `train/val/test/test_shifted.csv` and `manifest.json` to `<out>/data`.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<DataManifest> {
    let data = load_datasets(config)?;
    let dir = config.output_path().join("data");
    create_dir(&dir)?;
    let mut files = BTreeMap::new();
    for (name, ds) in [
        ("train", &data.train),
        ("val", &data.val),
        ("test", &data.test),
        ("test_shifted", &data.test_shifted),
    ] {
        let mut buf = Vec::new();
        datagen::write_csv(ds, &mut buf)?;
        let file = format!("{name}.csv");
        write_file(&dir.join(&file), &buf)?;
        files.insert(
            name.to_string(),
            FileEntry {
                path: file,
                sha256: sha256_hex(&buf),
                rows: ds.len(),
                group_sizes: ds.group_sizes().to_vec(),
                group_means: (0..ds.num_groups()).map(|g| ds.group_mean(g)).collect(),
            },
        );
    }
    let manifest = DataManifest {
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        shifts: config.dataset.shifts.clone(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    info!("wrote datasets to {}", dir.display());
    Ok(manifest)
}

/// Candidate radii: explicit grid, or the scale grid times `sqrt(n_min)`.
pub fn tuning_grid(config: &ExperimentConfig, train: &GroupedDataset) -> Vec<f64> {
    if let Some(g) = &config.tuning.grid {
        return g.clone();
    }
    let scale = config.tuning.grid_scale.clone().unwrap_or_else(default_grid_scale);
    let root = (train.min_group_size() as f64).sqrt();
    scale.into_iter().map(|c| c * root).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneArtifact {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub result: TuneResult,
}

/// Runs the radius search on the training split; writes `tune.json` and `tune_table.csv`.
pub fn cmd_tune(config: &ExperimentConfig) -> Result<TuneResult> {
    let data = load_datasets(config)?;
    tune_on(config, &data)
}

fn tune_on(config: &ExperimentConfig, data: &Datasets) -> Result<TuneResult> {
    let grid = tuning_grid(config, &data.train);
    let result = tune_epsilon(&data.train, &grid, &config.tune_config())?;
    let dir = config.output_path();
    create_dir(&dir)?;
    write_json(
        &dir.join("tune.json"),
        &TuneArtifact {
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            result: result.clone(),
        },
    )?;
    let mut table = provenance(config).into_bytes();
    write_tune_table(&result, &mut table).map_err(|e| CliError::io(dir.join("tune_table.csv"), e))?;
    write_file(&dir.join("tune_table.csv"), &table)?;
    info!("chosen epsilon {}", result.chosen_epsilon);
    Ok(result)
}

/// JSON has no NaN; failed cells store their metrics as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    fn wrap(v: f64) -> Option<f64> {
        (!v.is_nan()).then_some(v)
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_some(&wrap(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod pair {
        use super::*;

        pub fn serialize<S: Serializer>(v: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
            s.serialize_some(&(wrap(v.0), wrap(v.1)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f64, f64), D::Error> {
            let (a, b) = <(Option<f64>, Option<f64>)>::deserialize(d)?;
            Ok((a.unwrap_or(f64::NAN), b.unwrap_or(f64::NAN)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Mode,
    pub seed: u64,
    pub eps: f64,
    #[serde(with = "nan_as_null")]
    pub worst_acc_orig: f64,
    #[serde(with = "nan_as_null")]
    pub avg_acc_orig: f64,
    #[serde(with = "nan_as_null")]
    pub worst_acc_shift: f64,
    #[serde(with = "nan_as_null")]
    pub avg_acc_shift: f64,
    pub selected_iteration: u64,
    /// Set when the cell failed; metrics are then `NaN`.
    pub error: Option<String>,
    #[serde(default)]
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Mode,
    pub runs: usize,
    #[serde(with = "nan_as_null::pair")]
    pub worst_acc_orig: (f64, f64),
    #[serde(with = "nan_as_null::pair")]
    pub avg_acc_orig: (f64, f64),
    #[serde(with = "nan_as_null::pair")]
    pub worst_acc_shift: (f64, f64),
    #[serde(with = "nan_as_null::pair")]
    pub avg_acc_shift: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
    pub tuned: bool,
    pub cells: Vec<CellResult>,
    pub summary: Vec<MethodSummary>,
}

impl RunReport {
    pub fn summary_for(&self, method: Mode) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let sd = if values.len() > 1 { linalg::std_dev(values) } else { 0.0 };
    (linalg::mean(values), sd)
}

fn run_cell(
    config: &ExperimentConfig,
    data: &Datasets,
    method: Mode,
    seed: u64,
    epsilon: f64,
) -> Result<CellResult, HdroError> {
    let eps = if method == Mode::Hierarchical { epsilon } else { 0.0 };
    let amb = AmbiguityConfig::new(eps, data.train.group_sizes())?
        .with_inner_steps(config.ambiguity.inner_steps)?
        .with_eta_z(config.ambiguity.eta_z)?;
    let solver = config.solver.solver_config(method, seed);
    let init = config.model.build(data.train.dim(), data.train.num_labels(), seed);
    let out = train(&data.train, Some(&data.val), init, &solver, &amb)?;
    let weights = data.train.proportions();
    let orig = evaluate(&out.selected.theta, &data.test, weights)?;
    let shift = evaluate(&out.selected.theta, &data.test_shifted, weights)?;

    let dir = config.output_path();
    let stem = format!("{method}_seed{seed}");
    out.selected
        .theta
        .save_json(dir.join("checkpoints").join(format!("{stem}.json")))?;
    let hist_path = dir.join("histories").join(format!("{stem}.csv"));
    let io_err = |source| HdroError::Io {
        path: hist_path.display().to_string(),
        source,
    };
    let mut hist = provenance(config).into_bytes();
    write_history_csv(&out.final_state.history, data.train.num_groups(), &mut hist).map_err(io_err)?;
    fs::write(&hist_path, hist).map_err(io_err)?;
    Ok(CellResult {
        method,
        seed,
        eps,
        worst_acc_orig: orig.worst_group_acc,
        avg_acc_orig: orig.avg_acc_weighted,
        worst_acc_shift: shift.worst_group_acc,
        avg_acc_shift: shift.avg_acc_weighted,
        selected_iteration: out.selected.t,
        error: None,
        diverged: false,
    })
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Trains every (method, seed) cell in parallel, evaluates the selected
/// checkpoint on the original and shifted test sets, and writes
/// `results.csv`, `results.json`, checkpoints and histories.
///
/// A failing cell is recorded with its error; if any cell diverged the
/// command reports it after all artifacts are written.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunReport> {
    let data = load_datasets(config)?;
    let dir = config.output_path();
    create_dir(&dir.join("checkpoints"))?;
    create_dir(&dir.join("histories"))?;
    let (epsilon, tuned) = match config.ambiguity.epsilon {
        EpsilonSetting::Value(e) => (e, false),
        EpsilonSetting::Keyword(_) => {
            if config.evaluation.methods.contains(&Mode::Hierarchical) {
                (tune_on(config, &data)?.chosen_epsilon, true)
            } else {
                (0.0, true)
            }
        }
    };
    let cells: Vec<(Mode, u64)> = config
        .evaluation
        .methods
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(method, seed)| match run_cell(config, &data, method, seed, epsilon) {
            Ok(r) => r,
            Err(e) => {
                warn!("{method} seed {seed} failed: {e}");
                CellResult {
                    method,
                    seed,
                    eps: if method == Mode::Hierarchical { epsilon } else { 0.0 },
                    worst_acc_orig: f64::NAN,
                    avg_acc_orig: f64::NAN,
                    worst_acc_shift: f64::NAN,
                    avg_acc_shift: f64::NAN,
                    selected_iteration: 0,
                    diverged: matches!(e, HdroError::Divergence { .. }),
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();

    let summary: Vec<MethodSummary> = config
        .evaluation
        .methods
        .iter()
        .map(|&method| {
            let ok: Vec<&CellResult> = results
                .iter()
                .filter(|r| r.method == method && r.error.is_none())
                .collect();
            let col = |f: fn(&CellResult) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method,
                runs: ok.len(),
                worst_acc_orig: col(|r| r.worst_acc_orig),
                avg_acc_orig: col(|r| r.avg_acc_orig),
                worst_acc_shift: col(|r| r.worst_acc_shift),
                avg_acc_shift: col(|r| r.avg_acc_shift),
            }
        })
        .collect();

    let mut csv_text = provenance(config);
    csv_text.push_str(&RESULTS_HEADER.join(","));
    csv_text.push('\n');
    for r in &results {
        let _ = writeln!(
            csv_text,
            "{},{},{},{},{},{},{}",
            r.method,
            r.seed,
            r.eps,
            fmt_metric(r.worst_acc_orig),
            fmt_metric(r.avg_acc_orig),
            fmt_metric(r.worst_acc_shift),
            fmt_metric(r.avg_acc_shift)
        );
    }
    let eps_of = |m: Mode| if m == Mode::Hierarchical { epsilon } else { 0.0 };
    for s in &summary {
        let pm = |(m, sd): (f64, f64)| format!("{m:.4}±{sd:.4}");
        let _ = writeln!(
            csv_text,
            "{},mean±sd,{},{},{},{},{}",
            s.method,
            eps_of(s.method),
            pm(s.worst_acc_orig),
            pm(s.avg_acc_orig),
            pm(s.worst_acc_shift),
            pm(s.avg_acc_shift)
        );
    }
    write_file(&dir.join("results.csv"), csv_text.as_bytes())?;
    let report = RunReport {
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        epsilon,
        tuned,
        cells: results,
        summary,
    };
    write_json(&dir.join("results.json"), &report)?;

    let diverged = report.cells.iter().filter(|c| c.diverged).count();
    if diverged > 0 {
        return Err(CliError::CellsDiverged {
            failed: diverged,
            total: report.cells.len(),
        });
    }
    Ok(report)
}

/// Human-readable summary of whatever artifacts exist in `dir`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let read = |name: &str| -> Result<Option<String>> {
        let p = dir.join(name);
        if !p.is_file() {
            return Ok(None);
        }
        fs::read_to_string(&p).map(Some).map_err(|e| CliError::io(p, e))
    };
    let parse_err = |name: &str| {
        let path = dir.join(name);
        move |source| CliError::Json { path, source }
    };
    let mut found = false;
    if let Some(text) = read("results.json")? {
        found = true;
        let run: RunReport = serde_json::from_str(&text).map_err(parse_err("results.json"))?;
        let _ = writeln!(
            out,
            "config {}  seeds {:?}  epsilon {}{}",
            &run.config_hash[..12],
            run.seeds,
            run.epsilon,
            if run.tuned { " (tuned)" } else { "" }
        );
        let _ = writeln!(
            out,
            "{:<14} {:>5} {:>17} {:>17} {:>17} {:>17}",
            "method", "runs", "worst orig", "avg orig", "worst shift", "avg shift"
        );
        for s in &run.summary {
            let pm = |(m, sd): (f64, f64)| format!("{m:.4} ± {sd:.4}");
            let _ = writeln!(
                out,
                "{:<14} {:>5} {:>17} {:>17} {:>17} {:>17}",
                s.method.name(),
                s.runs,
                pm(s.worst_acc_orig),
                pm(s.avg_acc_orig),
                pm(s.worst_acc_shift),
                pm(s.avg_acc_shift)
            );
        }
        for c in run.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(
                out,
                "failed: {} seed {}: {}",
                c.method,
                c.seed,
                c.error.as_deref().unwrap_or("")
            );
        }
    }
    if let Some(text) = read("tune.json")? {
        found = true;
        let t: TuneArtifact = serde_json::from_str(&text).map_err(parse_err("tune.json"))?;
        let r = &t.result;
        let _ = writeln!(
            out,
            "\ntuning (minority group {}, {:?} aggregation)",
            r.minority_group, r.aggregation
        );
        let _ = writeln!(out, "{:>10} {:>8} {:>8} {:>8}", "epsilon", "top", "bottom", "agg");
        for i in 0..r.grid.len() {
            let mark = if r.grid[i] == r.chosen_epsilon { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:>10.4} {:>8.4} {:>8.4} {:>8.4}{mark}",
                r.grid[i], r.top_holdout_acc[i], r.bottom_holdout_acc[i], r.aggregate[i]
            );
        }
    }
    if let Some(text) = read("verify.json")? {
        found = true;
        let v: VerifyReport = serde_json::from_str(&text).map_err(parse_err("verify.json"))?;
        let _ = writeln!(
            out,
            "\nverification ({:?}): {}",
            v.level,
            if v.passed { "pass" } else { "FAIL" }
        );
        for c in &v.checks {
            let _ = writeln!(
                out,
                "  [{}] {:<28} {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
    }
    if !found {
        return Err(CliError::Config(format!("no artifacts found in {}", dir.display())));
    }
    Ok(out)
}

/// Runs the verification suite and writes `verify.json` into `dir`.
pub fn cmd_verify(level: VerifyLevel, latent_grad: LatentGradFn, dir: &Path) -> Result<VerifyReport> {
    let report = run_verify(level, latent_grad);
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join("verify.json");
    let json = serde_json::to_string_pretty(&report).map_err(|source| CliError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

impl VerifyReport {
    pub fn ensure_passed(&self) -> Result<()> {
        let failed: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::Verification(failed.join(", ")))
        }
    }
}
