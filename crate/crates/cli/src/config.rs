//! Experiment configuration: one JSON file with a block per concern.

use std::path::{Path, PathBuf};

use hdro::datagen::{ShiftSpec, SpuriousRecipe};
use hdro::model::{FeaturePath, ModelSpec};
use hdro::solver::{Mode, SolverConfig, StepSchedule};
use hdro::tuning::{Aggregation, OrderingSource, TuneConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Overrides the relative `output_dir` root.
pub const OUTPUT_ROOT_ENV: &str = "HDRO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetBlock,
    #[serde(default = "ModelSpec::linear")]
    pub model: ModelSpec,
    pub solver: SolverBlock,
    pub ambiguity: AmbiguityBlock,
    #[serde(default)]
    pub tuning: TuningBlock,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvBlock>,
    #[serde(default)]
    pub shifts: Vec<ShiftSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBlock {
    pub train: SpuriousRecipe,
    pub val_per_group: Vec<usize>,
    pub test_per_group: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvBlock {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    /// When absent, the test-time shifts are applied to `test`.
    #[serde(default)]
    pub test_shifted: Option<PathBuf>,
    #[serde(default = "two")]
    pub num_labels: usize,
    #[serde(default = "two")]
    pub num_attributes: usize,
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub eta_beta: f64,
    pub eta_theta: f64,
    #[serde(default)]
    pub adjustment_c: f64,
    pub iterations: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub step_schedule: StepSchedule,
    #[serde(default)]
    pub feature_path: FeaturePath,
}

impl SolverBlock {
    pub fn solver_config(&self, mode: Mode, seed: u64) -> SolverConfig {
        let mut c = SolverConfig::new(mode);
        c.eta_beta = self.eta_beta;
        c.eta_theta = self.eta_theta;
        c.adjustment_c = self.adjustment_c;
        c.iterations = self.iterations;
        c.batch_size = self.batch_size;
        c.checkpoint_every = self.checkpoint_every;
        c.step_schedule = self.step_schedule;
        c.feature_path = self.feature_path;
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSetting {
    Value(f64),
    Keyword(EpsilonKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonKeyword {
    Tuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguityBlock {
    pub epsilon: EpsilonSetting,
    #[serde(default = "one")]
    pub inner_steps: usize,
    #[serde(default)]
    pub eta_z: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningBlock {
    /// Candidates before scaling by `sqrt(n_min)`; defaults to `{12..96}/255`.
    #[serde(default)]
    pub grid_scale: Option<Vec<f64>>,
    /// Explicit candidates, used as given.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub ordering: OrderingSource,
    #[serde(default)]
    pub warmup_iterations: Option<u64>,
    /// Iterations per candidate run; defaults to the solver block.
    #[serde(default)]
    pub iterations: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationBlock {
    #[serde(default = "all_methods")]
    pub methods: Vec<Mode>,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self { methods: all_methods() }
    }
}

fn all_methods() -> Vec<Mode> {
    vec![Mode::Erm, Mode::GroupDro, Mode::Hierarchical]
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    /// Reads a config file, applies `key.path=value` overrides and validates.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: ExperimentConfig = serde_json::from_value(value).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let config = config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    /// CSV paths are taken relative to the config file.
    fn resolve_paths(mut self, base: &Path) -> Self {
        if let Some(csv) = self.dataset.csv.as_mut() {
            for p in [&mut csv.train, &mut csv.val, &mut csv.test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(p) = csv.test_shifted.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds must be nonempty"));
        }
        match (&self.dataset.generator, &self.dataset.csv) {
            (Some(g), None) => {
                g.train.validate()?;
                let m = g.train.n_per_group.len();
                if g.val_per_group.len() != m || g.test_per_group.len() != m {
                    return Err(invalid("val_per_group and test_per_group need one entry per group"));
                }
            }
            (None, Some(c)) => {
                for p in [Some(&c.train), Some(&c.val), Some(&c.test), c.test_shifted.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if !p.is_file() {
                        return Err(invalid(format!("dataset file {} does not exist", p.display())));
                    }
                }
            }
            _ => return Err(invalid("dataset needs exactly one of `generator` or `csv`")),
        }
        // CSV shapes are only known after loading; those shifts are checked then.
        if let Some(g) = &self.dataset.generator {
            for s in &self.dataset.shifts {
                s.validate(g.train.n_per_group.len(), hdro::datagen::FEATURE_DIM)?;
            }
        }
        self.solver.solver_config(Mode::Hierarchical, 0).validate()?;
        if let EpsilonSetting::Value(e) = self.ambiguity.epsilon {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(invalid(format!("epsilon must be >= 0, got {e}")));
            }
        }
        if self.ambiguity.inner_steps == 0 {
            return Err(invalid("inner_steps must be at least 1"));
        }
        if self.tuning.grid.is_some() && self.tuning.grid_scale.is_some() {
            return Err(invalid("set at most one of tuning.grid and tuning.grid_scale"));
        }
        for g in [&self.tuning.grid, &self.tuning.grid_scale].into_iter().flatten() {
            if g.is_empty() || g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(invalid("tuning grids must be nonempty and nonnegative"));
            }
        }
        if self.evaluation.methods.is_empty() {
            return Err(invalid("evaluation.methods must be nonempty"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// `output_dir`, placed under `$HDRO_OUTPUT_ROOT` when that is set and the
    /// directory is relative.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn tune_config(&self) -> TuneConfig {
        let mut solver = self.solver.solver_config(Mode::Hierarchical, self.tuning.seed);
        if let Some(it) = self.tuning.iterations {
            solver.iterations = it;
        }
        let mut t = TuneConfig::new(self.model, solver);
        t.inner_steps = self.ambiguity.inner_steps;
        t.eta_z = self.ambiguity.eta_z;
        t.aggregation = self.tuning.aggregation;
        t.ordering = self.tuning.ordering;
        if let Some(w) = self.tuning.warmup_iterations {
            t.warmup_iterations = w;
        }
        t.seed = self.tuning.seed;
        t
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{spec}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("override path `{key}` crosses a non-object")))?;
        if i + 1 == parts.len() {
            if obj.get(*part).is_some_and(|v| v.is_object() || v.is_array()) {
                return Err(invalid(format!("override `{key}` targets a non-scalar field")));
            }
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Value {
        serde_json::json!({
            "dataset": {"generator": {"train": {"n_per_group": [20, 6, 6, 20], "spurious_strength": 0.8, "noise_sd": 0.5, "label_flip_p": 0.0},
                                      "val_per_group": [10, 5, 5, 10], "test_per_group": [10, 5, 5, 10]}},
            "solver": {"eta_beta": 0.01, "eta_theta": 0.1, "iterations": 100, "batch_size": 8},
            "ambiguity": {"epsilon": "tuned"},
            "seeds": [0, 1],
            "output_dir": "out"
        })
    }

    #[test]
    fn parses_tuned_keyword_and_defaults() {
        let c: ExperimentConfig = serde_json::from_value(sample()).unwrap();
        assert_eq!(c.ambiguity.epsilon, EpsilonSetting::Keyword(EpsilonKeyword::Tuned));
        assert_eq!(c.evaluation.methods.len(), 3);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = sample();
        v["solver"]["momentum"] = serde_json::json!(0.9);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn overrides_set_scalars_only() {
        let mut v = sample();
        apply_override(&mut v, "solver.iterations=7").unwrap();
        apply_override(&mut v, "ambiguity.epsilon=0.5").unwrap();
        let c: ExperimentConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(c.solver.iterations, 7);
        assert_eq!(c.ambiguity.epsilon, EpsilonSetting::Value(0.5));
        assert!(apply_override(&mut v, "solver={}").is_err());
        assert!(apply_override(&mut v, "nonsense").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a: ExperimentConfig = serde_json::from_value(sample()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds.push(9);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn empty_seeds_fail_validation() {
        let mut c: ExperimentConfig = serde_json::from_value(sample()).unwrap();
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
