//! Oracle-grounded evaluation and the report types.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Correction;
use crate::data::LabeledDataset;
use crate::distill::DistilledSet;
use crate::error::{Error, Result};
use crate::matrix::argmax;
use crate::nn::{self, NetworkParams};
use crate::transition::TransitionMatrix;

pub fn predict(w: &NetworkParams, data: &LabeledDataset) -> Result<Vec<usize>> {
    let probs = nn::forward_probs(w, &data.features)?;
    Ok(probs.iter_rows().map(argmax).collect())
}

fn agreement(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Fraction of instances whose predicted class is the Bayes label.
pub fn accuracy_vs_bayes(w: &NetworkParams, test: &LabeledDataset) -> Result<f64> {
    if test.bayes_labels.len() != test.len() {
        return Err(Error::input("test set has no Bayes labels"));
    }
    Ok(agreement(&predict(w, test)?, &test.bayes_labels))
}

pub fn accuracy_vs_clean(w: &NetworkParams, test: &LabeledDataset) -> Result<f64> {
    if test.clean_labels.len() != test.len() {
        return Err(Error::input("test set has no clean labels"));
    }
    Ok(agreement(&predict(w, test)?, &test.clean_labels))
}

/// Clean accuracy of the analytic Bayes classifier.
pub fn bayes_accuracy_vs_clean(test: &LabeledDataset) -> f64 {
    agreement(&test.bayes_labels, &test.clean_labels)
}

pub fn row_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Copy, Debug)]
pub enum RowSubset<'a> {
    All,
    /// Indices into the dataset of the distilled instances.
    Distilled(&'a [usize]),
    /// Everything not listed.
    Heldout(&'a [usize]),
}

impl RowSubset<'_> {
    fn indices(&self, n: usize) -> Vec<usize> {
        match self {
            RowSubset::All => (0..n).collect(),
            RowSubset::Distilled(idx) => idx.to_vec(),
            RowSubset::Heldout(idx) => {
                let mut keep = vec![true; n];
                for &i in idx.iter() {
                    if i < n {
                        keep[i] = false;
                    }
                }
                (0..n).filter(|&i| keep[i]).collect()
            }
        }
    }
}

/// Mean row-ℓ1 distance between the estimated row at each instance's Bayes
/// label and the generating row; `None` when the subset is empty.
pub fn transition_row_l1(
    correction: &Correction<'_>,
    data: &LabeledDataset,
    subset: RowSubset<'_>,
) -> Result<Option<f64>> {
    let truth = data.true_rows()?;
    if data.bayes_labels.len() != data.len() {
        return Err(Error::input("dataset has no Bayes labels"));
    }
    let idx = subset.indices(data.len());
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
        return Err(Error::input(format!("subset index {bad} outside the dataset")));
    }
    if idx.is_empty() {
        return Ok(None);
    }
    let c = data.num_classes;
    let errors = idx
        .par_iter()
        .map(|&i| {
            let t = correction.matrix_at(data.features.row(i), c)?;
            Ok(row_l1(t.row(data.bayes_labels[i]), truth.row(i)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Some(errors.iter().sum::<f64>() / errors.len() as f64))
}

/// Laplace-smoothed flip frequencies `P(ỹ = j | ŷ* = i)` on the distilled set.
///
/// Returns the matrix and the classes that never occur as an inferred label.
pub fn class_dependent_matrix(distilled: &DistilledSet) -> Result<(TransitionMatrix, Vec<usize>)> {
    let c = distilled.num_classes;
    let mut counts = vec![0usize; c * c];
    for (&i, &j) in distilled.bayes_hat.iter().zip(&distilled.noisy_labels) {
        if i >= c || j >= c {
            return Err(Error::input("distilled label outside the class range"));
        }
        counts[i * c + j] += 1;
    }
    let mut entries = vec![0.0; c * c];
    let mut missing = Vec::new();
    for i in 0..c {
        let row = &counts[i * c..(i + 1) * c];
        let total: usize = row.iter().sum();
        if total == 0 {
            missing.push(i);
        }
        for j in 0..c {
            entries[i * c + j] = (row[j] + 1) as f64 / (total + c) as f64;
        }
    }
    if !missing.is_empty() {
        warn!("classes {missing:?} absent from the distilled set; using uniform rows");
    }
    Ok((TransitionMatrix::new(c, entries)?, missing))
}

/// Evaluation of one trained classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub test_accuracy_vs_bayes: f64,
    pub test_accuracy_vs_clean: f64,
    pub selected_epoch: usize,
    pub mean_row_l1_all: Option<f64>,
    pub mean_row_l1_distilled: Option<f64>,
    pub mean_row_l1_heldout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub failure: Option<StageFailure>,
    pub distill_precision: Option<f64>,
    pub distill_coverage: Option<f64>,
    pub distilled_count: Option<usize>,
    pub bayes_accuracy_vs_clean: Option<f64>,
    pub transition_risk_initial: Option<f64>,
    pub transition_risk_final: Option<f64>,
    pub revision_reverted: Option<bool>,
    pub methods: BTreeMap<String, MethodMetrics>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    /// Sample standard deviation; absent below two values.
    pub sd: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
        let sd = mean.filter(|_| n > 1).map(|m| {
            let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Self { mean, sd, n }
    }

    pub fn of_options(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        Self::of(&v)
    }
}

pub const PRIMARY_METHOD: &str = "bayes_t";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub test_accuracy_vs_bayes: Summary,
    pub test_accuracy_vs_clean: Summary,
    pub mean_row_l1_all: Summary,
    pub mean_row_l1_distilled: Summary,
    pub mean_row_l1_heldout: Summary,
}

impl MethodSummary {
    fn collect(per_seed: &[SeedReport], method: &str) -> Self {
        let rows: Vec<&MethodMetrics> = per_seed.iter().filter_map(|s| s.methods.get(method)).collect();
        Self {
            test_accuracy_vs_bayes: Summary::of_options(rows.iter().map(|m| Some(m.test_accuracy_vs_bayes))),
            test_accuracy_vs_clean: Summary::of_options(rows.iter().map(|m| Some(m.test_accuracy_vs_clean))),
            mean_row_l1_all: Summary::of_options(rows.iter().map(|m| m.mean_row_l1_all)),
            mean_row_l1_distilled: Summary::of_options(rows.iter().map(|m| m.mean_row_l1_distilled)),
            mean_row_l1_heldout: Summary::of_options(rows.iter().map(|m| m.mean_row_l1_heldout)),
        }
    }
}

/// Aggregate over seeds. Contains no timestamps, so reruns serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub method: String,
    pub test_accuracy_vs_bayes: Summary,
    pub test_accuracy_vs_clean: Summary,
    pub mean_row_l1_all: Summary,
    pub mean_row_l1_heldout: Summary,
    pub distill_precision: Summary,
    pub distill_coverage: Summary,
    pub bayes_accuracy_vs_clean: Summary,
    pub baselines: BTreeMap<String, MethodSummary>,
    pub per_seed: Vec<SeedReport>,
}

impl MetricsReport {
    pub fn aggregate(config_digest: String, per_seed: Vec<SeedReport>) -> Self {
        let primary = MethodSummary::collect(&per_seed, PRIMARY_METHOD);
        let mut names: Vec<&String> = per_seed.iter().flat_map(|s| s.methods.keys()).collect();
        names.sort();
        names.dedup();
        let baselines = names
            .into_iter()
            .filter(|n| n.as_str() != PRIMARY_METHOD)
            .map(|n| (n.clone(), MethodSummary::collect(&per_seed, n)))
            .collect();
        Self {
            config_digest,
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            method: PRIMARY_METHOD.to_string(),
            test_accuracy_vs_bayes: primary.test_accuracy_vs_bayes,
            test_accuracy_vs_clean: primary.test_accuracy_vs_clean,
            mean_row_l1_all: primary.mean_row_l1_all,
            mean_row_l1_heldout: primary.mean_row_l1_heldout,
            distill_precision: Summary::of_options(per_seed.iter().map(|s| s.distill_precision)),
            distill_coverage: Summary::of_options(per_seed.iter().map(|s| s.distill_coverage)),
            bayes_accuracy_vs_clean: Summary::of_options(per_seed.iter().map(|s| s.bayes_accuracy_vs_clean)),
            baselines,
            per_seed,
        }
    }

    pub fn failures(&self) -> Vec<(u64, &StageFailure)> {
        self.per_seed
            .iter()
            .filter_map(|s| s.failure.as_ref().map(|f| (s.seed, f)))
            .collect()
    }
}
