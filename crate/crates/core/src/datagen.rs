//! Grouped datasets with a controllable spurious attribute.
//!
//! A row carries features `x`, a label `y` in `[0, K)` and a spurious
//! attribute `a` in `[0, A)`. The group of a row is the pair `(y, a)` with
//! canonical index `y * A + a`, so the default recipe (`K = A = 2`) has four
//! groups: `(0,0)`, `(0,1)`, `(1,0)`, `(1,1)`.
//!
//! The synthetic recipe places the label signal on feature 0 (the core axis)
//! and the attribute signal on feature 1 (the spurious axis); the remaining
//! coordinates are pure noise. Minority-group shifts are rotations in the
//! `(0, 1)` plane or constant offsets, a feature-space stand-in for the image
//! transformations used on real benchmarks.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HdroError, Result};

/// Feature dimension of the synthetic recipe.
pub const FEATURE_DIM: usize = 10;
pub const CORE_AXIS: usize = 0;
pub const SPURIOUS_AXIS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    dim: usize,
    num_labels: usize,
    num_attributes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    groups: Vec<usize>,
    group_sizes: Vec<usize>,
    proportions: Vec<f64>,
}

impl GroupedDataset {
    /// Builds a dataset from row-major features. Group indices, group sizes
    /// and proportions are derived.
    pub fn new(
        dim: usize,
        num_labels: usize,
        num_attributes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        attributes: Vec<usize>,
    ) -> Result<Self> {
        if num_labels == 0 || num_attributes == 0 {
            return Err(HdroError::InvalidDataset(
                "label and attribute counts must be positive".into(),
            ));
        }
        let n = labels.len();
        if attributes.len() != n || features.len() != n * dim {
            return Err(HdroError::InvalidDataset(format!(
                "inconsistent lengths: {n} labels, {} attributes, {} feature values for dim {dim}",
                attributes.len(),
                features.len()
            )));
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(HdroError::InvalidDataset(format!(
                "non-finite feature in row {}",
                bad / dim.max(1)
            )));
        }
        let m = num_labels * num_attributes;
        let mut groups = Vec::with_capacity(n);
        let mut group_sizes = vec![0usize; m];
        for (i, (&y, &a)) in labels.iter().zip(&attributes).enumerate() {
            if y >= num_labels || a >= num_attributes {
                return Err(HdroError::InvalidDataset(format!(
                    "row {i}: (label {y}, attribute {a}) outside ({num_labels}, {num_attributes})"
                )));
            }
            let g = y * num_attributes + a;
            groups.push(g);
            group_sizes[g] += 1;
        }
        let proportions = group_sizes
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        Ok(Self {
            dim,
            num_labels,
            num_attributes,
            features,
            labels,
            attributes,
            groups,
            group_sizes,
            proportions,
        })
    }

    pub fn empty(dim: usize, num_labels: usize, num_attributes: usize) -> Self {
        Self::new(dim, num_labels, num_attributes, vec![], vec![], vec![]).expect("empty dataset is always valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn num_groups(&self) -> usize {
        self.num_labels * self.num_attributes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    pub fn group_of(&self) -> &[usize] {
        &self.groups
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// `alpha_g = n_g / n`.
    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn group_index(&self, label: usize, attribute: usize) -> usize {
        label * self.num_attributes + attribute
    }

    /// `(label, attribute)` of a group index.
    pub fn group_pair(&self, group: usize) -> (usize, usize) {
        (group / self.num_attributes, group % self.num_attributes)
    }

    /// Smallest group size, i.e. `n_min`.
    pub fn min_group_size(&self) -> usize {
        self.group_sizes.iter().copied().min().unwrap_or(0)
    }

    /// Index of the smallest group; ties go to the smallest index.
    pub fn minority_group(&self) -> usize {
        let mut best = 0;
        for (g, &n) in self.group_sizes.iter().enumerate() {
            if n < self.group_sizes[best] {
                best = g;
            }
        }
        best
    }

    /// Row indices per group, in row order.
    pub fn rows_by_group(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (i, &g) in self.groups.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    /// Fails unless every group has at least one row.
    pub fn require_all_groups(&self) -> Result<()> {
        match self.group_sizes.iter().position(|&c| c == 0) {
            Some(g) => Err(HdroError::InvalidDataset(format!("group {g} is empty"))),
            None => Ok(()),
        }
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> GroupedDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        let mut attributes = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            attributes.push(self.attributes[i]);
        }
        GroupedDataset::new(
            self.dim,
            self.num_labels,
            self.num_attributes,
            features,
            labels,
            attributes,
        )
        .expect("subset of a valid dataset is valid")
    }

    /// Per-group mean feature vector; `None` for empty groups.
    pub fn group_mean(&self, group: usize) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.dim];
        let mut count = 0usize;
        for i in 0..self.len() {
            if self.groups[i] == group {
                crate::linalg::axpy(1.0, self.row(i), &mut sum);
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        Some(sum.into_iter().map(|s| s / count as f64).collect())
    }
}

/// Parameters of the spurious-correlation generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousRecipe {
    /// Rows per group in canonical order `(0,0), (0,1), (1,0), (1,1)`.
    pub n_per_group: Vec<usize>,
    pub spurious_strength: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub label_flip_p: f64,
}

impl SpuriousRecipe {
    /// CMNIST-style imbalance: red:green 8:2 for class 0 and 2:8 for class 1,
    /// with a quarter of the labels flipped.
    pub fn cmnist_like() -> Self {
        Self {
            n_per_group: vec![4800, 1200, 1200, 4800],
            spurious_strength: 1.0,
            noise_sd: 1.0,
            label_flip_p: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_group.len() != 4 {
            return Err(HdroError::InvalidDataset(format!(
                "recipe needs 4 group sizes (K = A = 2), got {}",
                self.n_per_group.len()
            )));
        }
        if let Some(g) = self.n_per_group.iter().position(|&c| c == 0) {
            return Err(HdroError::InvalidDataset(format!("n_per_group[{g}] is zero")));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(HdroError::param(
                "spurious_strength",
                format!("must lie in [0, 1], got {}", self.spurious_strength),
            ));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(HdroError::param(
                "noise_sd",
                format!("must be positive, got {}", self.noise_sd),
            ));
        }
        if !(0.0..1.0).contains(&self.label_flip_p) {
            return Err(HdroError::param(
                "label_flip_p",
                format!("must lie in [0, 1), got {}", self.label_flip_p),
            ));
        }
        Ok(())
    }
}

/// Generates the spurious-correlation dataset.
///
/// Each row of observed group `(y, a)` is drawn from the feature law of
/// `(y', a)` where `y'` is the pre-noise label: `y' = y` except with
/// probability `label_flip_p`. Features are
/// `(2y' - 1) e_core + s (2a - 1) e_spurious + N(0, sd^2 I)` in 10 dimensions.
/// Drawing the noise this way keeps the observed group sizes exactly equal to
/// `n_per_group` while flipped rows follow their pre-noise group's law.
pub fn make_spurious(recipe: &SpuriousRecipe, seed: u64) -> Result<GroupedDataset> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, recipe.noise_sd).map_err(|e| HdroError::param("noise_sd", e.to_string()))?;
    let n: usize = recipe.n_per_group.iter().sum();
    let mut features = Vec::with_capacity(n * FEATURE_DIM);
    let mut labels = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    for (g, &count) in recipe.n_per_group.iter().enumerate() {
        let (y, a) = (g / 2, g % 2);
        for _ in 0..count {
            let mut row: Vec<f64> = (0..FEATURE_DIM).map(|_| noise.sample(&mut rng)).collect();
            let flipped = rng.random::<f64>() < recipe.label_flip_p;
            let law_label = if flipped { 1 - y } else { y };
            row[CORE_AXIS] += 2.0 * law_label as f64 - 1.0;
            row[SPURIOUS_AXIS] += recipe.spurious_strength * (2.0 * a as f64 - 1.0);
            features.extend_from_slice(&row);
            labels.push(y);
            attributes.push(a);
        }
    }
    GroupedDataset::new(FEATURE_DIM, 2, 2, features, labels, attributes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotation,
    Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftTarget {
    Train,
    Test,
}

/// A within-group shift applied to one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub target_group: usize,
    pub kind: ShiftKind,
    /// Radians for rotations (in `(-pi, pi]`), vector norm for offsets.
    pub magnitude: f64,
    pub applies_to: ShiftTarget,
    /// Offset direction; defaults to the core axis. Ignored by rotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
}

impl ShiftSpec {
    pub fn rotation(target_group: usize, radians: f64, applies_to: ShiftTarget) -> Self {
        Self {
            target_group,
            kind: ShiftKind::Rotation,
            magnitude: radians,
            applies_to,
            direction: None,
        }
    }

    pub fn offset(target_group: usize, norm: f64, applies_to: ShiftTarget) -> Self {
        Self {
            target_group,
            kind: ShiftKind::Offset,
            magnitude: norm,
            applies_to,
            direction: None,
        }
    }

    pub fn validate(&self, num_groups: usize, dim: usize) -> Result<()> {
        if self.target_group >= num_groups {
            return Err(HdroError::param(
                "target_group",
                format!("{} >= number of groups {num_groups}", self.target_group),
            ));
        }
        if !self.magnitude.is_finite() {
            return Err(HdroError::param("magnitude", "must be finite"));
        }
        match self.kind {
            ShiftKind::Rotation => {
                if !(self.magnitude > -PI && self.magnitude <= PI) {
                    return Err(HdroError::param(
                        "magnitude",
                        format!("rotation angle {} outside (-pi, pi]", self.magnitude),
                    ));
                }
                if dim < 2 {
                    return Err(HdroError::param(
                        "kind",
                        "rotation needs at least two feature coordinates",
                    ));
                }
            }
            ShiftKind::Offset => {
                if self.magnitude < 0.0 {
                    return Err(HdroError::param(
                        "magnitude",
                        format!("offset norm {} is negative", self.magnitude),
                    ));
                }
                if let Some(dir) = &self.direction {
                    crate::error::check_len("offset direction", dim, dir.len())?;
                    if crate::linalg::norm(dir) == 0.0 {
                        return Err(HdroError::param("direction", "zero offset direction"));
                    }
                }
            }
        }
        Ok(())
    }

    fn offset_vector(&self, dim: usize) -> Vec<f64> {
        match &self.direction {
            Some(dir) => {
                let n = crate::linalg::norm(dir);
                dir.iter().map(|v| self.magnitude * v / n).collect()
            }
            None => {
                let mut v = vec![0.0; dim];
                v[CORE_AXIS] = self.magnitude;
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShiftOutcome {
    pub dataset: GroupedDataset,
    pub rows_shifted: usize,
    /// Set when the target group has no rows and the shift was a no-op.
    pub warning: Option<String>,
}

/// Applies a shift to the rows of `spec.target_group`. All other rows, and
/// every label, attribute and group index, are left untouched.
pub fn apply_shift(ds: &GroupedDataset, spec: &ShiftSpec) -> Result<ShiftOutcome> {
    if ds.is_empty() {
        return Err(HdroError::InvalidDataset("cannot shift an empty dataset".into()));
    }
    spec.validate(ds.num_groups(), ds.dim())?;
    let mut out = ds.clone();
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.groups[i] == spec.target_group).collect();
    if rows.is_empty() {
        return Ok(ShiftOutcome {
            dataset: out,
            rows_shifted: 0,
            warning: Some(format!(
                "group {} absent from dataset; shift skipped",
                spec.target_group
            )),
        });
    }
    let d = ds.dim;
    match spec.kind {
        ShiftKind::Rotation => {
            let (sin, cos) = spec.magnitude.sin_cos();
            for &i in &rows {
                let r = &mut out.features[i * d..(i + 1) * d];
                let (x0, x1) = (r[0], r[1]);
                r[0] = cos * x0 - sin * x1;
                r[1] = sin * x0 + cos * x1;
            }
        }
        ShiftKind::Offset => {
            let v = spec.offset_vector(d);
            for &i in &rows {
                crate::linalg::axpy(1.0, &v, &mut out.features[i * d..(i + 1) * d]);
            }
        }
    }
    Ok(ShiftOutcome {
        dataset: out,
        rows_shifted: rows.len(),
        warning: None,
    })
}

fn format_float(v: f64) -> String {
    // 17 significant digits round-trips every f64 exactly.
    format!("{v:.16e}")
}

/// Writes `y,a,g,x0..x{d-1}` with a header row.
pub fn save_csv(ds: &GroupedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| HdroError::io(path, e))?;
    write_csv(ds, file).map_err(|e| match e {
        HdroError::Io { source, .. } => HdroError::io(path, source),
        other => other,
    })
}

pub fn write_csv<W: std::io::Write>(ds: &GroupedDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| HdroError::io("<csv>", std::io::Error::other(e));
    let mut header = vec!["y".to_string(), "a".to_string(), "g".to_string()];
    header.extend((0..ds.dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(to_err)?;
    for i in 0..ds.len() {
        let mut rec = vec![
            ds.labels[i].to_string(),
            ds.attributes[i].to_string(),
            ds.groups[i].to_string(),
        ];
        rec.extend(ds.row(i).iter().map(|&v| format_float(v)));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| HdroError::io("<csv>", e))?;
    Ok(())
}

/// Loads a CSV written by [`save_csv`] assuming the binary recipe (`K = A = 2`).
pub fn load_csv(path: impl AsRef<Path>) -> Result<GroupedDataset> {
    load_csv_with(path, 2, 2)
}

pub fn load_csv_with(path: impl AsRef<Path>, num_labels: usize, num_attributes: usize) -> Result<GroupedDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| HdroError::io(path, e))?;
    read_csv(file, num_labels, num_attributes)
}

pub fn read_csv<R: std::io::Read>(reader: R, num_labels: usize, num_attributes: usize) -> Result<GroupedDataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| HdroError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.len() < 3 || &header[0] != "y" || &header[1] != "a" || &header[2] != "g" {
        return Err(HdroError::Parse {
            line: 1,
            message: format!(
                "expected header `y,a,g,x0..`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("x{j}") {
            return Err(HdroError::Parse {
                line: 1,
                message: format!("column {} should be `x{j}`, got `{name}`", j + 3),
            });
        }
    }
    let dim = header.len() - 3;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut attributes = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| HdroError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != dim + 3 {
            return Err(HdroError::Parse {
                line,
                message: format!("expected {} fields, got {}", dim + 3, rec.len()),
            });
        }
        let int = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|e| HdroError::Parse {
                line,
                message: format!("bad {what} `{s}`: {e}"),
            })
        };
        let (y, a, g) = (
            int(&rec[0], "label")?,
            int(&rec[1], "attribute")?,
            int(&rec[2], "group")?,
        );
        if y >= num_labels || a >= num_attributes {
            return Err(HdroError::Schema {
                line,
                message: format!("(label {y}, attribute {a}) outside ({num_labels}, {num_attributes})"),
            });
        }
        if g != y * num_attributes + a {
            return Err(HdroError::Schema {
                line,
                message: format!("group {g} does not match (label {y}, attribute {a})"),
            });
        }
        for field in rec.iter().skip(3) {
            let v: f64 = field.trim().parse().map_err(|e| HdroError::Parse {
                line,
                message: format!("bad feature `{field}`: {e}"),
            })?;
            if !v.is_finite() {
                return Err(HdroError::Parse {
                    line,
                    message: format!("non-finite feature `{field}`"),
                });
            }
            features.push(v);
        }
        labels.push(y);
        attributes.push(a);
    }
    GroupedDataset::new(dim, num_labels, num_attributes, features, labels, attributes)
}
