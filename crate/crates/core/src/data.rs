//! Synthetic Gaussian-mixture data with analytic posteriors, and bounded
//! instance-dependent label noise.
//!
//! Noise follows the bounded generator: each instance draws a flip rate `q`
//! from a truncated normal, the row of its clean label keeps `1 - q` on the
//! diagonal, and the remaining mass `q` is split over the other classes by a
//! softmax of `x^T W_y`, one standard-normal projection `W_y` per class.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::io::{self, CsvOut};
use crate::matrix::{argmax, Matrix};
use crate::nn;
use crate::rng;
use crate::transition::TransitionMatrix;

/// One diagonal-covariance Gaussian component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    /// Per-dimension variances.
    pub var: Vec<f64>,
    pub prior: f64,
}

/// Class-conditional Gaussians, one component per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl GaussianMixtureSpec {
    /// Equal-prior, unit-variance classes at the given means.
    pub fn isotropic(means: &[Vec<f64>], var: f64) -> Self {
        let prior = 1.0 / means.len() as f64;
        Self {
            components: means
                .iter()
                .map(|m| MixtureComponent {
                    mean: m.clone(),
                    var: vec![var; m.len()],
                    prior,
                })
                .collect(),
        }
    }

    /// `classes` components evenly spaced on a circle of `radius` in 2-D.
    pub fn ring(classes: usize, radius: f64, var: f64) -> Self {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / classes as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::isotropic(&means, var)
    }

    pub fn classes(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map(|c| c.mean.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.components.is_empty() || d == 0 {
            return Err(Error::config("mixture needs at least one component of positive dimension"));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.var.len() != d {
                return Err(Error::config(format!("component {k} has inconsistent dimension")));
            }
            if !c.var.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("component {k} has a non-positive variance")));
            }
            if !c.mean.iter().all(|v| v.is_finite()) {
                return Err(Error::config(format!("component {k} has a non-finite mean")));
            }
            if !(c.prior > 0.0) {
                return Err(Error::config(format!("component {k} has zero prior")));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.prior).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("priors sum to {total}, not 1")));
        }
        Ok(())
    }

    fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let quad: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .zip(&c.var)
                    .map(|((x, m), v)| (x - m) * (x - m) / v + (std::f64::consts::TAU * v).ln())
                    .sum();
                c.prior.ln() - 0.5 * quad
            })
            .collect()
    }
}

/// Exact class posterior `P(Y | X = x)` under the mixture.
pub fn oracle_clean_posterior(spec: &GaussianMixtureSpec, x: &[f64]) -> Vec<f64> {
    nn::softmax(&spec.log_joint(x))
}

/// Features, label channels and optional ground truth for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub num_classes: usize,
    pub features: Matrix,
    pub clean_labels: Vec<usize>,
    pub bayes_labels: Vec<usize>,
    pub noisy_labels: Option<Vec<usize>>,
    pub flip_rates: Option<Vec<f64>>,
    /// Row of the generating matrix that produced each noisy label.
    pub true_rows: Option<Matrix>,
    pub clean_posteriors: Option<Matrix>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn noisy(&self) -> Result<&[usize]> {
        self.noisy_labels
            .as_deref()
            .ok_or_else(|| Error::input("dataset has no noisy-label channel"))
    }

    pub fn true_rows(&self) -> Result<&Matrix> {
        self.true_rows
            .as_ref()
            .ok_or_else(|| Error::input("dataset has no ground-truth transition rows"))
    }

    /// Rows `indices` of every channel, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &[usize]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            num_classes: self.num_classes,
            features: self.features.select_rows(indices),
            clean_labels: pick(&self.clean_labels),
            bayes_labels: pick(&self.bayes_labels),
            noisy_labels: self.noisy_labels.as_deref().map(pick),
            flip_rates: self
                .flip_rates
                .as_ref()
                .map(|q| indices.iter().map(|&i| q[i]).collect()),
            true_rows: self.true_rows.as_ref().map(|m| m.select_rows(indices)),
            clean_posteriors: self.clean_posteriors.as_ref().map(|m| m.select_rows(indices)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let c = self.num_classes;
        let labels_ok = |v: &[usize]| v.len() == n && v.iter().all(|&y| y < c);
        if c == 0 || !labels_ok(&self.clean_labels) || !labels_ok(&self.bayes_labels) {
            return Err(Error::input("label channel length or range is invalid"));
        }
        if let Some(noisy) = &self.noisy_labels {
            if !labels_ok(noisy) {
                return Err(Error::input("noisy-label channel length or range is invalid"));
            }
        }
        if let Some(q) = &self.flip_rates {
            if q.len() != n {
                return Err(Error::input("flip-rate channel has the wrong length"));
            }
        }
        for (name, m) in [("true_rows", &self.true_rows), ("clean_posteriors", &self.clean_posteriors)] {
            if let Some(m) = m {
                if m.rows() != n || m.cols() != c {
                    return Err(Error::input(format!("{name} channel has the wrong shape")));
                }
                for (i, row) in m.iter_rows().enumerate() {
                    if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(Error::input(format!("{name} row {i} does not sum to 1")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Draws `n` labelled points; instance `i` uses its own stream of `seed`.
pub fn generate_mixture(spec: &GaussianMixtureSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    let priors: Vec<f64> = spec.components.iter().map(|c| c.prior).collect();
    let d = spec.dim();
    let samples: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let y = sample_categorical(&priors, &mut r);
            let comp = &spec.components[y];
            let x: Vec<f64> = (0..d)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    comp.mean[k] + comp.var[k].sqrt() * z
                })
                .collect();
            let post = oracle_clean_posterior(spec, &x);
            (y, x, post)
        })
        .collect();
    let c = spec.classes();
    let mut features = Vec::with_capacity(n * d);
    let mut posts = Vec::with_capacity(n * c);
    let mut clean = Vec::with_capacity(n);
    let mut bayes = Vec::with_capacity(n);
    for (y, x, p) in samples {
        clean.push(y);
        bayes.push(argmax(&p));
        features.extend(x);
        posts.extend(p);
    }
    Ok(LabeledDataset {
        num_classes: c,
        features: Matrix::new(n, d, features)?,
        clean_labels: clean,
        bayes_labels: bayes,
        noisy_labels: None,
        flip_rates: None,
        true_rows: None,
        clean_posteriors: Some(Matrix::new(n, c, posts)?),
    })
}

/// Normal distribution conditioned on `[lo, hi]`, sampled by rejection.
#[derive(Clone, Copy, Debug)]
pub struct TruncatedNormal {
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
}

impl TruncatedNormal {
    /// Smallest interval mass accepted before rejection sampling is refused.
    pub const MIN_MASS: f64 = 1e-6;

    pub fn new(mean: f64, sd: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !(sd > 0.0) || !mean.is_finite() {
            return Err(Error::config(format!(
                "truncated normal needs lo < hi and sd > 0 (got mean {mean}, sd {sd}, [{lo}, {hi}])"
            )));
        }
        let normal = Normal::new(mean, sd).map_err(|e| Error::config(e.to_string()))?;
        let mass = normal.cdf(hi) - normal.cdf(lo);
        if !(mass >= Self::MIN_MASS) {
            return Err(Error::config(format!(
                "interval [{lo}, {hi}] holds only {mass:.3e} of N({mean}, {sd}^2)"
            )));
        }
        Ok(Self { mean, sd, lo, hi })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let v = self.mean + self.sd * z;
            if v >= self.lo && v <= self.hi {
                return v;
            }
        }
    }
}

pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(TruncatedNormal::new(mean, sd, lo, hi)?.sample(rng))
}

/// Settings of the bounded instance-dependent noise generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseGenConfig {
    /// Mean flip rate.
    #[serde(default = "default_rate")]
    pub target_rate: f64,
    #[serde(default = "default_rate_sd")]
    pub rate_sd: f64,
    /// Upper end of the flip-rate range.
    #[serde(default = "default_rate_bound")]
    pub rate_bound: f64,
    #[serde(skip)]
    pub projection_seed: u64,
    #[serde(skip)]
    pub rate_seed: u64,
    #[serde(skip)]
    pub flip_seed: u64,
}

fn default_rate() -> f64 {
    0.3
}
fn default_rate_sd() -> f64 {
    0.1
}
fn default_rate_bound() -> f64 {
    0.6
}

impl Default for NoiseGenConfig {
    fn default() -> Self {
        Self {
            target_rate: default_rate(),
            rate_sd: default_rate_sd(),
            rate_bound: default_rate_bound(),
            projection_seed: 0,
            rate_seed: 1,
            flip_seed: 2,
        }
    }
}

impl NoiseGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.target_rate && self.target_rate <= self.rate_bound && self.rate_bound < 1.0) {
            return Err(Error::config(format!(
                "noise needs 0 <= target_rate ({}) <= rate_bound ({}) < 1",
                self.target_rate, self.rate_bound
            )));
        }
        if !(self.rate_sd > 0.0) {
            return Err(Error::config("rate_sd must be positive"));
        }
        Ok(())
    }
}

/// Per-class projections `W_c` (shape `d x C`) of the noise generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub classes: usize,
    pub dim: usize,
    pub projections: Vec<Matrix>,
}

impl NoiseModel {
    /// Standard-normal projections; class `c` draws from stream `c` of `seed`.
    pub fn sample(dim: usize, classes: usize, seed: u64) -> Self {
        let projections = (0..classes)
            .map(|c| {
                let mut r = rng::stream(seed, c as u64);
                let data = (0..dim * classes).map(|_| StandardNormal.sample(&mut r)).collect();
                Matrix::new(dim, classes, data).expect("shape")
            })
            .collect();
        Self {
            classes,
            dim,
            projections,
        }
    }

    /// Logits `x^T W_y`.
    pub fn projection(&self, x: &[f64], y: usize) -> Vec<f64> {
        let w = &self.projections[y];
        let mut p = vec![0.0; self.classes];
        for (k, xk) in x.iter().enumerate() {
            for (pj, wkj) in p.iter_mut().zip(w.row(k)) {
                *pj += xk * wkj;
            }
        }
        p
    }

    /// Generating row for clean label `y` with flip rate `q`.
    pub fn row(&self, x: &[f64], y: usize, q: f64) -> Vec<f64> {
        let p = self.projection(x, y);
        flip_row(&p, y, q)
    }

    /// All `C` generating rows at `x` for one flip rate.
    pub fn matrix(&self, x: &[f64], q: f64) -> TransitionMatrix {
        let rows: Vec<Vec<f64>> = (0..self.classes).map(|y| self.row(x, y, q)).collect();
        TransitionMatrix::from_rows(&rows).expect("generated rows are stochastic")
    }
}

/// Masks entry `y`, softmaxes the rest, scales it to `q` and puts `1 - q` on `y`.
pub fn flip_row(projection: &[f64], y: usize, q: f64) -> Vec<f64> {
    let mut masked = projection.to_vec();
    masked[y] = f64::NEG_INFINITY;
    let mut row: Vec<f64> = nn::softmax(&masked).into_iter().map(|v| q * v).collect();
    row[y] = 1.0 - q;
    row
}

/// Adds noisy labels, flip rates and generating rows to a clean dataset.
pub fn inject_idn_noise(clean: &LabeledDataset, cfg: &NoiseGenConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    if clean.clean_labels.len() != clean.len() {
        return Err(Error::input("noise injection needs a clean-label channel"));
    }
    if clean.num_classes < 2 {
        return Err(Error::config("noise injection needs at least two classes"));
    }
    if !clean.features.is_finite() {
        return Err(Error::input("features must be finite"));
    }
    let c = clean.num_classes;
    let model = NoiseModel::sample(clean.dim(), c, cfg.projection_seed);
    let rates = TruncatedNormal::new(cfg.target_rate, cfg.rate_sd, 0.0, cfg.rate_bound)?;
    let draws: Vec<(f64, Vec<f64>, usize)> = (0..clean.len())
        .into_par_iter()
        .map(|i| {
            let q = rates.sample(&mut rng::stream(cfg.rate_seed, i as u64));
            let row = model.row(clean.features.row(i), clean.clean_labels[i], q);
            let noisy = sample_categorical(&row, &mut rng::stream(cfg.flip_seed, i as u64));
            (q, row, noisy)
        })
        .collect();
    let mut out = clean.clone();
    let mut rows = Vec::with_capacity(clean.len() * c);
    let mut q = Vec::with_capacity(clean.len());
    let mut noisy = Vec::with_capacity(clean.len());
    for (qi, row, yi) in draws {
        q.push(qi);
        rows.extend(row);
        noisy.push(yi);
    }
    out.noisy_labels = Some(noisy);
    out.flip_rates = Some(q);
    out.true_rows = Some(Matrix::new(clean.len(), c, rows)?);
    Ok(out)
}

/// Exact noisy posteriors `T(x)^T η(x)` from the generator and the clean posteriors.
pub fn oracle_noisy_posteriors(data: &LabeledDataset, model: &NoiseModel) -> Result<Matrix> {
    let post = data
        .clean_posteriors
        .as_ref()
        .ok_or_else(|| Error::input("oracle posteriors need the clean-posterior channel"))?;
    let q = data
        .flip_rates
        .as_ref()
        .ok_or_else(|| Error::input("oracle posteriors need the flip-rate channel"))?;
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| model.matrix(data.features.row(i), q[i]).transpose_mul(post.row(i)))
        .collect();
    Matrix::from_rows(&rows, data.num_classes)
}

/// Writes the dataset CSV, emitting only the channels that are present.
pub fn write_dataset(path: &Path, data: &LabeledDataset, digest: Option<&str>) -> Result<()> {
    let c = data.num_classes;
    let mut header: Vec<String> = (0..data.dim()).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    header.push("y_star".into());
    if data.noisy_labels.is_some() {
        header.push("y_tilde".into());
    }
    if data.flip_rates.is_some() {
        header.push("q".into());
    }
    if data.true_rows.is_some() {
        header.extend((0..c).map(|j| format!("t_row_{j}")));
    }
    if data.clean_posteriors.is_some() {
        header.extend((0..c).map(|j| format!("post_{j}")));
    }
    let mut w = CsvOut::create(path, digest)?;
    w.record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| io::fmt_f64(*v)).collect();
        rec.push(data.clean_labels[i].to_string());
        rec.push(data.bayes_labels[i].to_string());
        if let Some(n) = &data.noisy_labels {
            rec.push(n[i].to_string());
        }
        if let Some(q) = &data.flip_rates {
            rec.push(io::fmt_f64(q[i]));
        }
        for m in [&data.true_rows, &data.clean_posteriors].into_iter().flatten() {
            rec.extend(m.row(i).iter().map(|v| io::fmt_f64(*v)));
        }
        w.record(&rec)?;
    }
    w.finish()
}

fn indexed_group(header: &[String], prefix: &str) -> Result<Vec<usize>> {
    let mut cols = Vec::new();
    while let Some(pos) = header.iter().position(|h| *h == format!("{prefix}{}", cols.len())) {
        cols.push(pos);
    }
    let extra = header
        .iter()
        .filter(|h| h.starts_with(prefix) && h[prefix.len()..].parse::<usize>().is_ok())
        .count();
    if extra != cols.len() {
        return Err(Error::Parse {
            line: 1,
            message: format!("column group `{prefix}*` is not numbered contiguously from 0"),
        });
    }
    Ok(cols)
}

/// Reads a dataset CSV; optional column groups that are absent stay `None`.
pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let table = io::read_csv(path)?;
    let header = &table.header;
    let x_cols = indexed_group(header, "x")?;
    let t_cols = indexed_group(header, "t_row_")?;
    let p_cols = indexed_group(header, "post_")?;
    let known = |h: &str| {
        matches!(h, "y" | "y_star" | "y_tilde" | "q")
            || [("x", &x_cols), ("t_row_", &t_cols), ("post_", &p_cols)]
                .iter()
                .any(|(p, cols)| {
                    h.strip_prefix(p)
                        .and_then(|s| s.parse::<usize>().ok())
                        .is_some_and(|k| k < cols.len())
                })
    };
    if let Some(bad) = header.iter().find(|h| !known(h)) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unknown column `{bad}`"),
        });
    }
    if x_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "missing feature columns `x0..`".into(),
        });
    }
    let required = |name: &str| {
        table.column(name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let y_col = required("y")?;
    let ys_col = required("y_star")?;
    let yt_col = table.column("y_tilde");
    let q_col = table.column("q");
    if !t_cols.is_empty() && !p_cols.is_empty() && t_cols.len() != p_cols.len() {
        return Err(Error::Parse {
            line: 1,
            message: "t_row_* and post_* groups disagree on the class count".into(),
        });
    }

    let n = table.rows.len();
    let d = x_cols.len();
    let mut features = Vec::with_capacity(n * d);
    let (mut clean, mut bayes) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut noisy = yt_col.map(|_| Vec::with_capacity(n));
    let mut rates = q_col.map(|_| Vec::with_capacity(n));
    let mut rows = Vec::with_capacity(n * t_cols.len());
    let mut posts = Vec::with_capacity(n * p_cols.len());
    for (line, rec) in &table.rows {
        let line = *line;
        for &k in &x_cols {
            features.push(io::parse_field::<f64>(&rec[k], &header[k], line)?);
        }
        clean.push(io::parse_field::<usize>(&rec[y_col], "y", line)?);
        bayes.push(io::parse_field::<usize>(&rec[ys_col], "y_star", line)?);
        if let (Some(col), Some(v)) = (yt_col, noisy.as_mut()) {
            v.push(io::parse_field::<usize>(&rec[col], "y_tilde", line)?);
        }
        if let (Some(col), Some(v)) = (q_col, rates.as_mut()) {
            v.push(io::parse_field::<f64>(&rec[col], "q", line)?);
        }
        for &k in &t_cols {
            rows.push(io::parse_field::<f64>(&rec[k], &header[k], line)?);
        }
        for &k in &p_cols {
            posts.push(io::parse_field::<f64>(&rec[k], &header[k], line)?);
        }
    }
    let from_groups = t_cols.len().max(p_cols.len());
    let num_classes = if from_groups > 0 {
        from_groups
    } else {
        clean
            .iter()
            .chain(&bayes)
            .chain(noisy.iter().flatten())
            .max()
            .map_or(1, |m| m + 1)
    };
    let data = LabeledDataset {
        num_classes,
        features: Matrix::new(n, d, features)?,
        clean_labels: clean,
        bayes_labels: bayes,
        noisy_labels: noisy,
        flip_rates: rates,
        true_rows: (!t_cols.is_empty())
            .then(|| Matrix::new(n, num_classes, rows))
            .transpose()?,
        clean_posteriors: (!p_cols.is_empty())
            .then(|| Matrix::new(n, num_classes, posts))
            .transpose()?,
    };
    data.validate()?;
    Ok(data)
}
