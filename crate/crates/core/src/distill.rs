//! Warm-up noisy-posterior estimation and distilled-example collection.
//!
//! An instance is distilled when its largest noisy posterior exceeds
//! `(1 + rho_max) / 2`; with flip rates bounded by `rho_max`, the clean
//! posterior of that class is then above one half, so the argmax is the
//! Bayes label.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::io::{self, CsvOut};
use crate::matrix::{argmax, Matrix};
use crate::nn::{self, Batch, Head, LossSpec, NetworkParams, OptimizerKind, OptimizerState};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Assumed upper bound on flip rates; sets the admission threshold.
    #[serde(default = "default_rho")]
    pub rho_max: f64,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(skip)]
    pub hidden: Vec<usize>,
    #[serde(skip)]
    pub seed: u64,
}

fn default_rho() -> f64 {
    0.3
}
fn default_warmup_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rho_max: default_rho(),
            warmup_epochs: default_warmup_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            hidden: vec![32, 32],
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn threshold(&self) -> f64 {
        admission_threshold(self.rho_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho_max) {
            return Err(Error::config(format!("rho_max {} must lie in [0, 1)", self.rho_max)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        OptimizerKind::sgd(self.lr, self.momentum).validate()
    }
}

pub fn admission_threshold(rho_max: f64) -> f64 {
    (1.0 + rho_max) / 2.0
}

/// Distilled examples, ordered by their index in the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledSet {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub noisy_labels: Vec<usize>,
    /// Inferred Bayes labels.
    pub bayes_hat: Vec<usize>,
    /// The posterior value that cleared the threshold.
    pub admit_posterior: Vec<f64>,
    pub threshold: f64,
    pub num_classes: usize,
}

impl DistilledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Every example listed twice, in order; used to check risk invariance.
    pub fn duplicated(&self) -> Self {
        let idx: Vec<usize> = (0..self.len()).chain(0..self.len()).collect();
        let pick = |v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            indices: pick(&self.indices),
            features: self.features.select_rows(&idx),
            noisy_labels: pick(&self.noisy_labels),
            bayes_hat: pick(&self.bayes_hat),
            admit_posterior: idx.iter().map(|&i| self.admit_posterior[i]).collect(),
            threshold: self.threshold,
            num_classes: self.num_classes,
        }
    }
}

/// Plain cross-entropy training of the noisy-posterior estimator on `(x, ỹ)`.
pub fn warmup_train(noisy: &LabeledDataset, cfg: &DistillConfig) -> Result<NetworkParams> {
    cfg.validate()?;
    let labels = noisy.noisy()?;
    if noisy.is_empty() {
        return Err(Error::input("cannot warm up on an empty dataset"));
    }
    let c = noisy.num_classes;
    let mut dims = vec![noisy.dim()];
    dims.extend(&cfg.hidden);
    dims.push(c);
    let mut params = NetworkParams::init(&dims, Head::Softmax, cfg.seed)?;
    let mut state = OptimizerState::for_params(OptimizerKind::sgd(cfg.lr, cfg.momentum), &params);
    let mut shuffle = rng::stream(cfg.seed, u64::MAX);
    for epoch in 0..cfg.warmup_epochs {
        for (b, idx) in nn::epoch_batches(noisy.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let batch = Batch::one_hot(noisy.features.select_rows(&idx), &y, c)?;
            let (loss, grads) = nn::grad_params(&params, &batch, LossSpec::CrossEntropy)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            state.step(&mut params, &grads)?;
        }
    }
    Ok(params)
}

/// Admits instances whose estimated noisy posterior clears the threshold.
pub fn collect_distilled(
    noisy: &LabeledDataset,
    estimator: &NetworkParams,
    cfg: &DistillConfig,
) -> Result<DistilledSet> {
    if estimator.output_dim() != noisy.num_classes {
        return Err(Error::config(format!(
            "estimator emits {} classes, dataset has {}",
            estimator.output_dim(),
            noisy.num_classes
        )));
    }
    let posteriors = nn::forward_probs(estimator, &noisy.features)?;
    collect_from_posteriors(noisy, &posteriors, cfg.rho_max)
}

/// Threshold rule applied to any source of noisy posteriors, learned or exact.
pub fn collect_from_posteriors(
    noisy: &LabeledDataset,
    posteriors: &Matrix,
    rho_max: f64,
) -> Result<DistilledSet> {
    let labels = noisy.noisy()?;
    if posteriors.rows() != noisy.len() || posteriors.cols() != noisy.num_classes {
        return Err(Error::input("posterior matrix does not match the dataset"));
    }
    let threshold = admission_threshold(rho_max);
    let admitted: Vec<(usize, usize, f64)> = (0..noisy.len())
        .into_par_iter()
        .filter_map(|i| {
            let p = posteriors.row(i);
            let k = argmax(p);
            (p[k] > threshold).then_some((i, k, p[k]))
        })
        .collect();
    let indices: Vec<usize> = admitted.iter().map(|a| a.0).collect();
    Ok(DistilledSet {
        features: noisy.features.select_rows(&indices),
        noisy_labels: indices.iter().map(|&i| labels[i]).collect(),
        bayes_hat: admitted.iter().map(|a| a.1).collect(),
        admit_posterior: admitted.iter().map(|a| a.2).collect(),
        indices,
        threshold,
        num_classes: noisy.num_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillQuality {
    /// Fraction of distilled examples whose inferred label is the true Bayes label.
    pub precision: Option<f64>,
    pub coverage: f64,
    pub noisy_agreement: Option<f64>,
}

pub fn distill_quality(distilled: &DistilledSet, source: &LabeledDataset) -> Result<DistillQuality> {
    if distilled.indices.iter().any(|&i| i >= source.len()) {
        return Err(Error::input("distilled index outside the source dataset"));
    }
    let n = distilled.len();
    let coverage = if source.is_empty() { 0.0 } else { n as f64 / source.len() as f64 };
    if n == 0 {
        return Ok(DistillQuality {
            precision: None,
            coverage,
            noisy_agreement: None,
        });
    }
    let correct = distilled
        .indices
        .iter()
        .zip(&distilled.bayes_hat)
        .filter(|(&i, &k)| source.bayes_labels[i] == k)
        .count();
    let agree = distilled
        .noisy_labels
        .iter()
        .zip(&distilled.bayes_hat)
        .filter(|(a, b)| a == b)
        .count();
    Ok(DistillQuality {
        precision: Some(correct as f64 / n as f64),
        coverage,
        noisy_agreement: Some(agree as f64 / n as f64),
    })
}

/// `src_index,x0..x{d-1},y_tilde,y_star_hat,admit_posterior`.
pub fn write_distilled(path: &Path, set: &DistilledSet, digest: Option<&str>) -> Result<()> {
    let d = set.features.cols();
    let mut w = CsvOut::create(path, digest)?;
    let mut header = vec!["src_index".to_string()];
    header.extend((0..d).map(|k| format!("x{k}")));
    header.extend(["y_tilde", "y_star_hat", "admit_posterior"].map(String::from));
    w.record(&header)?;
    for i in 0..set.len() {
        let mut rec = vec![set.indices[i].to_string()];
        rec.extend(set.features.row(i).iter().map(|v| io::fmt_f64(*v)));
        rec.push(set.noisy_labels[i].to_string());
        rec.push(set.bayes_hat[i].to_string());
        rec.push(io::fmt_f64(set.admit_posterior[i]));
        w.record(&rec)?;
    }
    w.finish()
}

/// Reads a distilled CSV; the file does not carry the threshold or class count.
pub fn read_distilled(path: &Path, num_classes: usize, rho_max: f64) -> Result<DistilledSet> {
    let table = io::read_csv(path)?;
    let h = &table.header;
    let d = h.len().checked_sub(4).ok_or(Error::Parse {
        line: 1,
        message: "distilled file has too few columns".into(),
    })?;
    let mut expected = vec!["src_index".to_string()];
    expected.extend((0..d).map(|k| format!("x{k}")));
    expected.extend(["y_tilde", "y_star_hat", "admit_posterior"].map(String::from));
    if let Some((got, want)) = h.iter().zip(&expected).find(|(a, b)| a != b) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected column `{got}`, expected `{want}`"),
        });
    }
    let threshold = admission_threshold(rho_max);
    let mut set = DistilledSet {
        indices: Vec::new(),
        features: Matrix::zeros(0, d),
        noisy_labels: Vec::new(),
        bayes_hat: Vec::new(),
        admit_posterior: Vec::new(),
        threshold,
        num_classes,
    };
    let mut feats = Vec::with_capacity(table.rows.len() * d);
    for (line, rec) in &table.rows {
        set.indices.push(io::parse_field(&rec[0], "src_index", *line)?);
        for k in 0..d {
            feats.push(io::parse_field::<f64>(&rec[1 + k], &h[1 + k], *line)?);
        }
        let yt: usize = io::parse_field(&rec[d + 1], "y_tilde", *line)?;
        let ys: usize = io::parse_field(&rec[d + 2], "y_star_hat", *line)?;
        if yt >= num_classes || ys >= num_classes {
            return Err(Error::Parse {
                line: *line,
                message: format!("label outside 0..{num_classes}"),
            });
        }
        set.noisy_labels.push(yt);
        set.bayes_hat.push(ys);
        set.admit_posterior.push(io::parse_field(&rec[d + 3], "admit_posterior", *line)?);
    }
    set.features = Matrix::new(set.indices.len(), d, feats)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(noisy: Vec<usize>, bayes: Vec<usize>, c: usize) -> LabeledDataset {
        let n = noisy.len();
        LabeledDataset {
            num_classes: c,
            features: Matrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            clean_labels: bayes.clone(),
            bayes_labels: bayes,
            noisy_labels: Some(noisy),
            flip_rates: None,
            true_rows: None,
            clean_posteriors: None,
        }
    }

    #[test]
    fn threshold_admission_examples() {
        let data = dataset(vec![1, 0], vec![0, 0], 3);
        let post = Matrix::new(2, 3, vec![0.7, 0.2, 0.1, 0.3, 0.35, 0.35]).unwrap();
        let set = collect_from_posteriors(&data, &post, 0.3).unwrap();
        assert_eq!(set.indices, vec![0]);
        assert_eq!(set.bayes_hat, vec![0]);
        assert_eq!(set.noisy_labels, vec![1]);
        assert_eq!(set.admit_posterior, vec![0.7]);
    }

    #[test]
    fn boundary_is_strict() {
        let data = dataset(vec![0], vec![0], 2);
        let post = Matrix::new(1, 2, vec![0.65, 0.35]).unwrap();
        assert!(collect_from_posteriors(&data, &post, 0.3).unwrap().is_empty());
    }

    #[test]
    fn high_rho_admits_nothing_soft() {
        let data = dataset(vec![0, 1], vec![0, 1], 2);
        let post = Matrix::new(2, 2, vec![0.999, 0.001, 0.2, 0.8]).unwrap();
        assert!(collect_from_posteriors(&data, &post, 0.999).unwrap().is_empty());
    }

    #[test]
    fn quality_metrics() {
        let data = dataset(vec![1, 0, 2], vec![0, 0, 2], 3);
        let post = Matrix::new(3, 3, vec![0.9, 0.05, 0.05, 0.1, 0.85, 0.05, 0.02, 0.02, 0.96]).unwrap();
        let set = collect_from_posteriors(&data, &post, 0.3).unwrap();
        let q = distill_quality(&set, &data).unwrap();
        assert_eq!(q.coverage, 1.0);
        assert!((q.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.noisy_agreement.unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let empty = collect_from_posteriors(&data, &post, 0.99).unwrap();
        let q = distill_quality(&empty, &data).unwrap();
        assert_eq!(q.coverage, 0.0);
        assert!(q.precision.is_none());

        let mut copied = set.clone();
        copied.bayes_hat = copied.indices.iter().map(|&i| data.bayes_labels[i]).collect();
        assert_eq!(distill_quality(&copied, &data).unwrap().precision, Some(1.0));
    }

    #[test]
    fn raising_rho_never_grows_the_set() {
        let data = dataset(vec![0; 5], vec![0; 5], 2);
        let post = Matrix::new(5, 2, vec![0.55, 0.45, 0.62, 0.38, 0.7, 0.3, 0.81, 0.19, 0.97, 0.03]).unwrap();
        let mut prev = usize::MAX;
        for rho in [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
            let n = collect_from_posteriors(&data, &post, rho).unwrap().len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn warmup_zero_epochs_is_initialization() {
        let data = dataset(vec![0, 1, 0], vec![0, 1, 0], 2);
        let cfg = DistillConfig {
            warmup_epochs: 0,
            hidden: vec![4],
            seed: 3,
            ..DistillConfig::default()
        };
        let net = warmup_train(&data, &cfg).unwrap();
        assert_eq!(net, NetworkParams::init(&[1, 4, 2], Head::Softmax, 3).unwrap());
    }

    #[test]
    fn warmup_needs_noisy_labels() {
        let mut data = dataset(vec![0], vec![0], 2);
        data.noisy_labels = None;
        assert!(matches!(warmup_train(&data, &DistillConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn distilled_csv_round_trip() {
        let data = dataset(vec![1, 0, 2], vec![0, 0, 2], 3);
        let post = Matrix::new(3, 3, vec![0.9, 0.05, 0.05, 0.1, 0.85, 0.05, 0.02, 0.02, 0.96]).unwrap();
        let set = collect_from_posteriors(&data, &post, 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("distilled.csv");
        write_distilled(&path, &set, Some("d")).unwrap();
        assert_eq!(read_distilled(&path, 3, 0.3).unwrap(), set);
    }
}
