//! Instance-dependent Bayes-label transition matrices: the row-softmax
//! transition network, its selected-row risk, posterior inversion and the
//! additive-slack revision.

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distill::DistilledSet;
use crate::error::{Error, Result};
use crate::io;
use crate::matrix::Matrix;
use crate::nn::{self, Batch, Head, LossSpec, NetworkParams, OptimizerKind, OptimizerState};
use crate::rng;

/// Tolerance on row sums for a matrix to count as row-stochastic.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Condition number above which `T^T` is treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

/// Floor added before row renormalization in [`revise_matrix`].
pub const REVISION_FLOOR: f64 = 1e-12;

/// Row-stochastic `C x C` matrix; entry `(i, j)` is `P(noisy = j | bayes = i, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(classes: usize, entries: Vec<f64>) -> Result<Self> {
        if classes == 0 || entries.len() != classes * classes {
            return Err(Error::config(format!(
                "transition matrix needs {} entries, got {}",
                classes * classes,
                entries.len()
            )));
        }
        for (i, row) in entries.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::input(format!(
                    "row {i} of transition matrix is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(Self { classes, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        let mut entries = Vec::with_capacity(c * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::config("transition matrix must be square"));
            }
            entries.extend_from_slice(row);
        }
        Self::new(c, entries)
    }

    pub fn identity(classes: usize) -> Self {
        let mut entries = vec![0.0; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0;
        }
        Self { classes, entries }
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            classes,
            entries: vec![1.0 / classes as f64; classes * classes],
        }
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.classes..(i + 1) * self.classes]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.classes + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `T^T v`, i.e. the noisy posterior implied by a Bayes posterior `v`.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        nn::mix_through(v, self)
    }
}

/// Per-row softmax of the transition network's `C*C` logits at `x`.
pub fn transition_forward(theta: &NetworkParams, x: &[f64]) -> Result<TransitionMatrix> {
    let Head::RowSoftmax { classes } = theta.head() else {
        return Err(Error::config("transition network needs a row-softmax head"));
    };
    let logits = theta.logits(x)?;
    let entries = logits.chunks_exact(classes).flat_map(nn::softmax).collect();
    Ok(TransitionMatrix { classes, entries })
}

/// Transition matrices for every row of `inputs`.
pub fn transition_forward_all(theta: &NetworkParams, inputs: &Matrix) -> Result<Vec<TransitionMatrix>> {
    inputs.iter_rows().map(|x| transition_forward(theta, x)).collect()
}

fn r1_batch(distilled: &DistilledSet, indices: &[usize]) -> Result<(Batch, Vec<usize>)> {
    let inputs = distilled.features.select_rows(indices);
    let noisy: Vec<usize> = indices.iter().map(|&i| distilled.noisy_labels[i]).collect();
    let rows: Vec<usize> = indices.iter().map(|&i| distilled.bayes_hat[i]).collect();
    Ok((Batch::one_hot(inputs, &noisy, distilled.num_classes)?, rows))
}

/// Mean cross-entropy between the noisy label and row `ŷ*` of the predicted matrix.
pub fn risk_r1(theta: &NetworkParams, distilled: &DistilledSet) -> Result<f64> {
    if distilled.is_empty() {
        return Err(Error::input("risk over an empty distilled set"));
    }
    let all: Vec<usize> = (0..distilled.len()).collect();
    let (batch, rows) = r1_batch(distilled, &all)?;
    nn::loss(theta, &batch, LossSpec::SelectedRow(&rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
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

fn default_epochs() -> usize {
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

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            hidden: vec![32, 32],
            seed: 0,
        }
    }
}

/// Result of [`train_transition`].
#[derive(Clone, Debug)]
pub struct TransitionFit {
    pub params: NetworkParams,
    pub initial_risk: f64,
    pub final_risk: f64,
    /// Classes that never occur as an inferred Bayes label; their rows stay untrained.
    pub missing_classes: Vec<usize>,
}

/// Minibatch SGD on the selected-row risk over the distilled set.
pub fn train_transition(distilled: &DistilledSet, cfg: &TransitionConfig) -> Result<TransitionFit> {
    if distilled.is_empty() {
        return Err(Error::stage(
            "train-transition",
            "distilled set is empty; lower rho_max to admit more examples",
        ));
    }
    let c = distilled.num_classes;
    let optimizer = OptimizerKind::sgd(cfg.lr, cfg.momentum);
    optimizer.validate()?;
    let mut dims = vec![distilled.features.cols()];
    dims.extend(&cfg.hidden);
    dims.push(c * c);
    let mut params = NetworkParams::init(&dims, Head::RowSoftmax { classes: c }, cfg.seed)?;

    let mut seen = vec![false; c];
    for &y in &distilled.bayes_hat {
        seen[y] = true;
    }
    let missing_classes: Vec<usize> = (0..c).filter(|&k| !seen[k]).collect();
    if !missing_classes.is_empty() {
        warn!("classes {missing_classes:?} have no distilled examples; their transition rows stay untrained");
    }

    let initial_risk = risk_r1(&params, distilled)?;
    let mut state = OptimizerState::for_params(optimizer, &params);
    let mut shuffle = rng::stream(cfg.seed, u64::MAX);
    for epoch in 0..cfg.epochs {
        for (b, idx) in nn::epoch_batches(distilled.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let (batch, rows) = r1_batch(distilled, &idx)?;
            let (loss, grads) = nn::grad_params(&params, &batch, LossSpec::SelectedRow(&rows))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            state.step(&mut params, &grads)?;
        }
    }
    let final_risk = risk_r1(&params, distilled)?;
    Ok(TransitionFit {
        params,
        initial_risk,
        final_risk,
        missing_classes,
    })
}

/// Solves `T^T p = noisy` for the Bayes posterior `p`.
///
/// The raw solution is returned; it may hold small negative entries when the
/// inputs are estimates.
pub fn invert_posterior(t: &TransitionMatrix, noisy_posterior: &[f64]) -> Result<Vec<f64>> {
    let c = t.classes();
    if noisy_posterior.len() != c {
        return Err(Error::input(format!(
            "posterior has {} entries, matrix has {c} classes",
            noisy_posterior.len()
        )));
    }
    let tt = DMatrix::from_fn(c, c, |i, j| t.get(j, i));
    let sv = tt.clone().singular_values();
    let (hi, lo) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), s| (hi.max(*s), lo.min(*s)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let rhs = nalgebra::DVector::from_column_slice(noisy_posterior);
    let sol = tt
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular { condition })?;
    Ok(sol.iter().copied().collect())
}

/// Global additive slack applied to transition matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisionSlack {
    pub classes: usize,
    pub delta: Vec<f64>,
}

impl RevisionSlack {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            delta: vec![0.0; classes * classes],
        }
    }

    /// Clamps every entry into `[-1, 1]`.
    pub fn clamp(&mut self) {
        for d in &mut self.delta {
            *d = d.clamp(-1.0, 1.0);
        }
    }
}

/// `rownormalize(relu(T + ΔT) + floor)`.
pub fn revise_matrix(t: &TransitionMatrix, slack: &RevisionSlack) -> TransitionMatrix {
    let c = t.classes();
    assert_eq!(slack.classes, c, "slack and matrix class counts differ");
    let mut entries = Vec::with_capacity(c * c);
    for i in 0..c {
        let raw: Vec<f64> = (0..c)
            .map(|j| (t.get(i, j) + slack.delta[i * c + j]).max(0.0) + REVISION_FLOOR)
            .collect();
        let sum: f64 = raw.iter().sum();
        entries.extend(raw.into_iter().map(|u| u / sum));
    }
    TransitionMatrix { classes: c, entries }
}

/// Chain rule through [`revise_matrix`]: maps `dL/dT'` to `dL/dΔT`.
pub fn revise_backward(t: &TransitionMatrix, slack: &RevisionSlack, grad_revised: &[f64]) -> Vec<f64> {
    let c = t.classes();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        let pre: Vec<f64> = (0..c).map(|j| t.get(i, j) + slack.delta[i * c + j]).collect();
        let raw: Vec<f64> = pre.iter().map(|v| v.max(0.0) + REVISION_FLOOR).collect();
        let sum: f64 = raw.iter().sum();
        let g = &grad_revised[i * c..(i + 1) * c];
        let dot: f64 = g.iter().zip(&raw).map(|(g, u)| g * u / sum).sum();
        for j in 0..c {
            if pre[j] > 0.0 {
                out[i * c + j] = (g[j] - dot) / sum;
            }
        }
    }
    out
}

/// Writes per-instance matrices as `index,i,j,value` rows.
pub fn write_matrices_csv(path: &Path, matrices: &[TransitionMatrix], digest: Option<&str>) -> Result<()> {
    let mut w = io::CsvOut::create(path, digest)?;
    w.record(["index", "i", "j", "value"])?;
    for (n, t) in matrices.iter().enumerate() {
        for i in 0..t.classes() {
            for j in 0..t.classes() {
                w.record([
                    n.to_string(),
                    i.to_string(),
                    j.to_string(),
                    io::fmt_f64(t.get(i, j)),
                ])?;
            }
        }
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};

    fn linear_transition_net(bias: Vec<f64>, classes: usize) -> NetworkParams {
        NetworkParams::new(
            vec![Layer {
                in_dim: 1,
                out_dim: classes * classes,
                weights: vec![0.0; classes * classes],
                bias,
                activation: Activation::Identity,
            }],
            Head::RowSoftmax { classes },
        )
        .unwrap()
    }

    fn distilled(features: Vec<f64>, noisy: Vec<usize>, bayes: Vec<usize>, c: usize) -> DistilledSet {
        let n = noisy.len();
        let d = features.len() / n.max(1);
        DistilledSet {
            indices: (0..n).collect(),
            features: Matrix::new(n, d, features).unwrap(),
            noisy_labels: noisy,
            bayes_hat: bayes,
            admit_posterior: vec![0.9; n],
            threshold: 0.65,
            num_classes: c,
        }
    }

    #[test]
    fn zero_network_gives_uniform_rows() {
        let net = NetworkParams::zeros(&[2, 4, 9], Head::RowSoftmax { classes: 3 }).unwrap();
        let t = transition_forward(&net, &[1.0, -4.0]).unwrap();
        assert!(t.entries().iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn row_logit_shift_is_invisible() {
        let a = linear_transition_net(vec![0.3, -1.0, 2.0, 0.5], 2);
        let b = linear_transition_net(vec![5.3, 4.0, 2.0, 0.5], 2);
        let (ta, tb) = (transition_forward(&a, &[0.0]).unwrap(), transition_forward(&b, &[0.0]).unwrap());
        for (x, y) in ta.entries().iter().zip(tb.entries()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_softmax_row() {
        let net = linear_transition_net(vec![9f64.ln(), 0.0, 0.0, 0.0], 2);
        let t = transition_forward(&net, &[0.0]).unwrap();
        assert!((t.get(0, 0) - 0.9).abs() < 1e-15);
        assert!((t.get(0, 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn forward_requires_row_head() {
        let net = NetworkParams::zeros(&[1, 4], Head::Softmax).unwrap();
        assert!(matches!(transition_forward(&net, &[0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn risk_r1_examples() {
        // Uniform matrix: ln C regardless of labels.
        let net = NetworkParams::zeros(&[1, 100], Head::RowSoftmax { classes: 10 }).unwrap();
        let d = distilled(vec![0.0, 1.0], vec![3, 7], vec![1, 7], 10);
        assert!((risk_r1(&net, &d).unwrap() - 10f64.ln()).abs() < 1e-12);

        // Row 0 = [0.9, 0.1], row 1 = [0.25, 0.75].
        let net = linear_transition_net(vec![9f64.ln(), 0.0, 0.0, 3f64.ln()], 2);
        let d = distilled(vec![0.0, 0.0], vec![0, 1], vec![0, 1], 2);
        let expected = (-(0.9f64.ln()) - 0.75f64.ln()) / 2.0;
        assert!((risk_r1(&net, &d).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.19652).abs() < 1e-5);

        // Very peaked rows give (numerically) zero loss.
        let net = linear_transition_net(vec![50.0, 0.0, 0.0, 50.0], 2);
        let d = distilled(vec![0.0, 0.0], vec![0, 1], vec![0, 1], 2);
        assert!(risk_r1(&net, &d).unwrap() < 1e-20);
    }

    #[test]
    fn risk_r1_rejects_out_of_range_labels() {
        let net = linear_transition_net(vec![0.0; 4], 2);
        let d = distilled(vec![0.0], vec![5], vec![0], 2);
        assert!(risk_r1(&net, &d).is_err());
    }

    #[test]
    fn training_learns_constant_row() {
        let n = 400;
        let feats: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) - 0.5).collect();
        let d = distilled(feats, vec![1; n], vec![1; n], 3);
        let cfg = TransitionConfig {
            epochs: 20,
            hidden: vec![8],
            seed: 4,
            ..TransitionConfig::default()
        };
        let fit = train_transition(&d, &cfg).unwrap();
        assert!(fit.final_risk <= fit.initial_risk);
        assert_eq!(fit.missing_classes, vec![0, 2]);
        let t = transition_forward(&fit.params, &[0.1]).unwrap();
        assert!(t.get(1, 1) > 0.95, "{}", t.get(1, 1));
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let d = distilled(vec![0.0, 1.0], vec![0, 1], vec![0, 1], 2);
        let cfg = TransitionConfig {
            epochs: 0,
            hidden: vec![4],
            seed: 8,
            ..TransitionConfig::default()
        };
        let fit = train_transition(&d, &cfg).unwrap();
        let init = NetworkParams::init(&[1, 4, 4], Head::RowSoftmax { classes: 2 }, 8).unwrap();
        assert_eq!(fit.params, init);
    }

    #[test]
    fn empty_distilled_set_is_a_stage_error() {
        let d = distilled(vec![], vec![], vec![], 2);
        let err = train_transition(&d, &TransitionConfig::default()).unwrap_err();
        assert!(err.to_string().contains("lower rho_max"));
    }

    #[test]
    fn inversion_examples() {
        let id = TransitionMatrix::identity(3);
        assert_eq!(invert_posterior(&id, &[0.2, 0.3, 0.5]).unwrap(), vec![0.2, 0.3, 0.5]);

        let t = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let p = invert_posterior(&t, &[0.9, 0.1]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12, "{p:?}");

        let t = TransitionMatrix::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.15, 0.6, 0.25],
            vec![0.05, 0.3, 0.65],
        ])
        .unwrap();
        for k in 0..3 {
            let mut e = vec![0.0; 3];
            e[k] = 1.0;
            let back = invert_posterior(&t, &t.transpose_mul(&e)).unwrap();
            for (a, b) in back.iter().zip(&e) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let t = TransitionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        match invert_posterior(&t, &[0.5, 0.5]) {
            Err(Error::Singular { condition }) => assert!(condition > MAX_CONDITION),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn revision_examples() {
        let t = TransitionMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let same = revise_matrix(&t, &RevisionSlack::zeros(2));
        for (a, b) in same.entries().iter().zip(t.entries()) {
            assert!((a - b).abs() < 1e-9);
        }

        let mut slack = RevisionSlack::zeros(2);
        slack.delta[1] = 0.1;
        let r = revise_matrix(&t, &slack);
        assert!((r.get(0, 0) - 0.8 / 1.1).abs() < 1e-9);
        assert!((r.get(0, 1) - 0.3 / 1.1).abs() < 1e-9);
        assert!((r.get(0, 0) - 0.7273).abs() < 1e-4);

        let mut slack = RevisionSlack::zeros(2);
        slack.delta[2] = -5.0;
        slack.delta[3] = -5.0;
        let r = revise_matrix(&t, &slack);
        assert!((r.get(1, 0) - 0.5).abs() < 1e-12);
        assert!((r.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn revise_backward_matches_finite_differences() {
        let t = TransitionMatrix::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.15, 0.6, 0.25],
            vec![0.05, 0.3, 0.65],
        ])
        .unwrap();
        let mut slack = RevisionSlack::zeros(3);
        slack.delta = vec![0.05, -0.1, 0.02, 0.0, 0.1, -0.03, 0.2, -0.05, 0.01];
        let weights: Vec<f64> = (0..9).map(|k| (k as f64 * 0.7).sin()).collect();
        let objective = |s: &RevisionSlack| -> f64 {
            revise_matrix(&t, s).entries().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let analytic = revise_backward(&t, &slack, &weights);
        let eps = 1e-6;
        for k in 0..9 {
            let mut up = slack.clone();
            up.delta[k] += eps;
            let mut down = slack.clone();
            down.delta[k] -= eps;
            let fd = (objective(&up) - objective(&down)) / (2.0 * eps);
            assert!((fd - analytic[k]).abs() < 1e-8, "entry {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn matrix_validation() {
        assert!(TransitionMatrix::from_rows(&[vec![0.6, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(TransitionMatrix::from_rows(&[vec![1.2, -0.2], vec![0.5, 0.5]]).is_err());
        assert!(TransitionMatrix::from_rows(&[vec![1.0, 0.0]]).is_err());
    }
}
