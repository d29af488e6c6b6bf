//! Worst-group and size-weighted accuracy.

use serde::{Deserialize, Serialize};

use crate::datagen::GroupedDataset;
use crate::error::{check_len, HdroError, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy per group; `NaN` for groups with no rows.
    pub per_group_acc: Vec<f64>,
    pub worst_group_acc: f64,
    pub avg_acc_weighted: f64,
    /// Weights actually applied (training proportions renormalized over the
    /// groups present in the evaluated set).
    pub group_weights_used: Vec<f64>,
    pub missing_groups: Vec<usize>,
}

/// Builds a report from per-group accuracies (`None` = group absent).
pub fn summarize(accuracies: &[Option<f64>], training_weights: &[f64]) -> Result<EvalReport> {
    check_len("training weights", accuracies.len(), training_weights.len())?;
    let total: f64 = training_weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || training_weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(HdroError::param(
            "training_weights",
            format!("must be nonnegative and sum to 1, sum is {total}"),
        ));
    }
    let missing_groups: Vec<usize> = accuracies
        .iter()
        .enumerate()
        .filter_map(|(g, a)| a.is_none().then_some(g))
        .collect();
    if missing_groups.len() == accuracies.len() {
        return Err(HdroError::InvalidDataset("no group present in evaluation set".into()));
    }
    let present_mass: f64 = accuracies
        .iter()
        .zip(training_weights)
        .filter(|(a, _)| a.is_some())
        .map(|(_, w)| w)
        .sum();
    let group_weights_used: Vec<f64> = accuracies
        .iter()
        .zip(training_weights)
        .map(|(a, &w)| match a {
            Some(_) if present_mass > 0.0 => w / present_mass,
            _ => 0.0,
        })
        .collect();
    let worst_group_acc = accuracies.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let avg_acc_weighted = accuracies
        .iter()
        .zip(&group_weights_used)
        .filter_map(|(a, w)| a.map(|a| a * w))
        .sum();
    Ok(EvalReport {
        per_group_acc: accuracies.iter().map(|a| a.unwrap_or(f64::NAN)).collect(),
        worst_group_acc,
        avg_acc_weighted,
        group_weights_used,
        missing_groups,
    })
}

/// Per-group accuracy of argmax-logit predictions, worst-group accuracy and
/// the average weighted by training group proportions.
pub fn evaluate(theta: &ModelParams, ds: &GroupedDataset, training_weights: &[f64]) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(HdroError::InvalidDataset("evaluation set is empty".into()));
    }
    let m = ds.num_groups();
    let mut correct = vec![0usize; m];
    for i in 0..ds.len() {
        if theta.predict(ds.row(i))? == ds.labels()[i] {
            correct[ds.group_of()[i]] += 1;
        }
    }
    let accuracies: Vec<Option<f64>> = correct
        .iter()
        .zip(ds.group_sizes())
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    summarize(&accuracies, training_weights)
}
