//! Forward-corrected classifier training with a frozen transition source,
//! noisy-validation model selection and slack-revision fine-tuning.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics;
use crate::nn::{self, Batch, Head, LossSpec, NetworkParams, OptimizerKind, OptimizerState};
use crate::rng;
use crate::transition::{self, RevisionSlack, TransitionMatrix};

/// Where the per-instance transition matrices come from.
#[derive(Clone, Debug)]
pub enum Correction<'a> {
    /// No correction: plain cross-entropy.
    Identity,
    /// Learned instance-dependent network.
    Instance(&'a NetworkParams),
    /// One matrix shared by every instance.
    Global(TransitionMatrix),
    /// Instance-dependent network followed by a global slack revision.
    Revised {
        theta: &'a NetworkParams,
        slack: RevisionSlack,
    },
}

impl Correction<'_> {
    /// Matrices for every row of `inputs`; `None` for the identity correction.
    pub fn table(&self, inputs: &Matrix) -> Result<Option<Vec<TransitionMatrix>>> {
        Ok(match self {
            Correction::Identity => None,
            Correction::Instance(theta) => Some(transition::transition_forward_all(theta, inputs)?),
            Correction::Global(t) => Some(vec![t.clone(); inputs.rows()]),
            Correction::Revised { theta, slack } => Some(revised_table(
                &transition::transition_forward_all(theta, inputs)?,
                slack,
            )),
        })
    }

    pub fn matrix_at(&self, x: &[f64], classes: usize) -> Result<TransitionMatrix> {
        match self {
            Correction::Identity => Ok(TransitionMatrix::identity(classes)),
            Correction::Instance(theta) => transition::transition_forward(theta, x),
            Correction::Global(t) => Ok(t.clone()),
            Correction::Revised { theta, slack } => {
                Ok(transition::revise_matrix(&transition::transition_forward(theta, x)?, slack))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionConfig {
    /// Fine-tuning epochs over the validation split; 0 disables revision.
    #[serde(default = "default_revision_epochs")]
    pub epochs: usize,
    /// Adam learning rate for the slack.
    #[serde(default = "default_revision_lr")]
    pub lr: f64,
    /// Keep the slack at zero and only continue training the classifier.
    #[serde(default)]
    pub freeze_slack: bool,
}

fn default_revision_epochs() -> usize {
    10
}
fn default_revision_lr() -> f64 {
    1e-3
}

impl Default for RevisionConfig {
    fn default() -> Self {
        Self {
            epochs: default_revision_epochs(),
            lr: default_revision_lr(),
            freeze_slack: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub revision: RevisionConfig,
    #[serde(skip)]
    pub hidden: Vec<usize>,
    #[serde(skip)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    128
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::adam(1e-3, 1e-4)
}
fn default_validation_fraction() -> f64 {
    0.1
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            validation_fraction: default_validation_fraction(),
            revision: RevisionConfig::default(),
            hidden: vec![32, 32],
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config(format!(
                "validation_fraction {} must lie in (0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.revision.lr > 0.0) {
            return Err(Error::config("revision lr must be positive"));
        }
        self.optimizer.validate()
    }
}

fn one_hot_batch(inputs: &Matrix, labels: &[usize], idx: &[usize], classes: usize) -> Result<Batch> {
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    Batch::one_hot(inputs.select_rows(idx), &y, classes)
}

/// Mean forward-corrected risk; `table = None` means plain cross-entropy.
fn risk_with_table(
    w: &NetworkParams,
    inputs: &Matrix,
    labels: &[usize],
    table: Option<&[TransitionMatrix]>,
    classes: usize,
) -> Result<f64> {
    let batch = Batch::one_hot(inputs.clone(), labels, classes)?;
    match table {
        None => nn::loss(w, &batch, LossSpec::CrossEntropy),
        Some(t) => nn::loss(w, &batch, LossSpec::ForwardCorrected(t)),
    }
}

/// Forward-corrected risk of `w` with transition matrices from `theta`.
pub fn risk_r2(w: &NetworkParams, theta: &NetworkParams, inputs: &Matrix, noisy_labels: &[usize]) -> Result<f64> {
    let table = transition::transition_forward_all(theta, inputs)?;
    risk_with_table(w, inputs, noisy_labels, Some(&table), w.output_dim())
}

/// Forward-corrected risk on a dataset's noisy labels.
pub fn corrected_risk(w: &NetworkParams, data: &LabeledDataset, correction: &Correction<'_>) -> Result<f64> {
    let table = correction.table(&data.features)?;
    risk_with_table(w, &data.features, data.noisy()?, table.as_deref(), data.num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_r2: f64,
    pub val_r2: f64,
    /// Uncorrected validation cross-entropy, logged alongside the selection criterion.
    pub val_ce: f64,
    pub test_acc_vs_bayes: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    /// Checkpoint 0 is the initialization; checkpoint `k` follows epoch `k`.
    pub checkpoints: Vec<NetworkParams>,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn val_risks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_r2).collect()
    }
}

struct Split<'d> {
    data: &'d LabeledDataset,
    labels: &'d [usize],
    table: Option<Vec<TransitionMatrix>>,
}

impl<'d> Split<'d> {
    fn new(data: &'d LabeledDataset, correction: &Correction<'_>) -> Result<Self> {
        Ok(Self {
            data,
            labels: data.noisy()?,
            table: correction.table(&data.features)?,
        })
    }

    fn risk(&self, w: &NetworkParams) -> Result<f64> {
        risk_with_table(w, &self.data.features, self.labels, self.table.as_deref(), self.data.num_classes)
    }
}

fn run_epoch(
    w: &mut NetworkParams,
    state: &mut OptimizerState,
    split: &Split<'_>,
    batch_size: usize,
    shuffle: &mut impl rand::Rng,
    epoch: usize,
) -> Result<()> {
    let c = split.data.num_classes;
    for (b, idx) in nn::epoch_batches(split.data.len(), batch_size, shuffle).into_iter().enumerate() {
        let batch = one_hot_batch(&split.data.features, split.labels, &idx, c)?;
        let mats: Option<Vec<TransitionMatrix>> =
            split.table.as_ref().map(|t| idx.iter().map(|&i| t[i].clone()).collect());
        let spec = match &mats {
            None => LossSpec::CrossEntropy,
            Some(m) => LossSpec::ForwardCorrected(m),
        };
        let (loss, grads) = nn::grad_params(w, &batch, spec).map_err(|e| match e {
            Error::Numeric { .. } => Error::Diverged { epoch, batch: b },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: b });
        }
        state.step(w, &grads)?;
    }
    Ok(())
}

/// Minibatch Adam on the forward-corrected risk with the transition source frozen.
pub fn train_classifier(
    train: &LabeledDataset,
    val: &LabeledDataset,
    correction: &Correction<'_>,
    cfg: &TrainRunConfig,
    test: Option<&LabeledDataset>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let c = train.num_classes;
    let train_split = Split::new(train, correction)?;
    let val_split = Split::new(val, correction)?;
    let val_plain = Split::new(val, &Correction::Identity)?;
    let mut dims = vec![train.dim()];
    dims.extend(&cfg.hidden);
    dims.push(c);
    let mut w = NetworkParams::init(&dims, Head::Softmax, cfg.seed)?;
    let mut state = OptimizerState::for_params(cfg.optimizer, &w);
    let mut shuffle = rng::stream(cfg.seed, u64::MAX);

    let mut history = TrainHistory {
        checkpoints: Vec::with_capacity(cfg.epochs + 1),
        records: Vec::with_capacity(cfg.epochs + 1),
    };
    let record = |epoch: usize, w: &NetworkParams| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train_r2: train_split.risk(w)?,
            val_r2: val_split.risk(w)?,
            val_ce: val_plain.risk(w)?,
            test_acc_vs_bayes: test.map(|t| metrics::accuracy_vs_bayes(w, t)).transpose()?,
        })
    };
    history.records.push(record(0, &w)?);
    history.checkpoints.push(w.clone());
    for epoch in 1..=cfg.epochs {
        run_epoch(&mut w, &mut state, &train_split, cfg.batch_size, &mut shuffle, epoch)?;
        history.records.push(record(epoch, &w)?);
        history.checkpoints.push(w.clone());
    }
    Ok(history)
}

/// Index of the smallest value; ties resolve to the earliest.
pub fn argmin_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = k;
        }
    }
    best
}

/// Checkpoint with the lowest corrected validation risk.
pub fn select_model(
    checkpoints: &[NetworkParams],
    noisy_val: &LabeledDataset,
    correction: &Correction<'_>,
) -> Result<(usize, NetworkParams)> {
    if checkpoints.is_empty() {
        return Err(Error::input("no checkpoints to select from"));
    }
    let split = Split::new(noisy_val, correction)?;
    let risks = checkpoints.iter().map(|w| split.risk(w)).collect::<Result<Vec<_>>>()?;
    let k = argmin_earliest(&risks);
    Ok((k, checkpoints[k].clone()))
}

/// Continues forward-corrected training of `w` on `data` with a fresh optimizer.
pub fn continue_training(
    w: &NetworkParams,
    data: &LabeledDataset,
    correction: &Correction<'_>,
    cfg: &TrainRunConfig,
    epochs: usize,
) -> Result<NetworkParams> {
    let split = Split::new(data, correction)?;
    let mut w = w.clone();
    let mut state = OptimizerState::for_params(cfg.optimizer, &w);
    let mut shuffle = rng::stream(cfg.seed, u64::MAX - 1);
    for epoch in 1..=epochs {
        run_epoch(&mut w, &mut state, &split, cfg.batch_size, &mut shuffle, epoch)?;
    }
    Ok(w)
}

#[derive(Clone, Debug)]
pub struct RevisionOutcome {
    pub classifier: NetworkParams,
    pub slack: RevisionSlack,
    /// Validation risk before fine-tuning followed by one value per epoch.
    pub val_risks: Vec<f64>,
    /// Set when the risk rose for five consecutive epochs and the inputs were restored.
    pub reverted: bool,
}

fn revised_table(base: &[TransitionMatrix], slack: &RevisionSlack) -> Vec<TransitionMatrix> {
    base.iter().map(|t| transition::revise_matrix(t, slack)).collect()
}

/// Jointly descends the classifier and a global slack on the revised forward-corrected risk.
pub fn finetune_revision(
    w: &NetworkParams,
    slack: &RevisionSlack,
    correction: &Correction<'_>,
    noisy_val: &LabeledDataset,
    cfg: &TrainRunConfig,
) -> Result<RevisionOutcome> {
    cfg.validate()?;
    let c = noisy_val.num_classes;
    if slack.classes != c {
        return Err(Error::config("slack class count differs from the dataset"));
    }
    let epochs = cfg.revision.epochs;
    let labels = noisy_val.noisy()?;
    let base = correction
        .table(&noisy_val.features)?
        .unwrap_or_else(|| vec![TransitionMatrix::identity(c); noisy_val.len()]);
    let frozen = cfg.revision.freeze_slack;
    let risk = |w: &NetworkParams, s: &RevisionSlack| -> Result<f64> {
        if frozen {
            risk_with_table(w, &noisy_val.features, labels, Some(&base), c)
        } else {
            risk_with_table(w, &noisy_val.features, labels, Some(&revised_table(&base, s)), c)
        }
    };

    let mut out = RevisionOutcome {
        classifier: w.clone(),
        slack: slack.clone(),
        val_risks: vec![risk(w, slack)?],
        reverted: false,
    };
    let mut w_state = OptimizerState::for_params(cfg.optimizer, w);
    let mut s_state = OptimizerState::new(OptimizerKind::adam(cfg.revision.lr, 0.0), &[c * c]);
    let mut shuffle = rng::stream(cfg.seed, u64::MAX - 1);
    let mut rising = 0;
    for epoch in 1..=epochs {
        for (b, idx) in nn::epoch_batches(noisy_val.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let batch = one_hot_batch(&noisy_val.features, labels, &idx, c)?;
            let base_b: Vec<TransitionMatrix> = idx.iter().map(|&i| base[i].clone()).collect();
            let mats = if frozen { base_b.clone() } else { revised_table(&base_b, &out.slack) };
            let (loss, grads) = nn::grad_params(&out.classifier, &batch, LossSpec::ForwardCorrected(&mats))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            if !frozen {
                let g_slack = slack_gradient(&out.classifier, &batch, &base_b, &mats, &out.slack)?;
                s_state.step_tensors(&mut [out.slack.delta.as_mut_slice()], &[&g_slack])?;
                out.slack.clamp();
            }
            w_state.step(&mut out.classifier, &grads)?;
        }
        let r = risk(&out.classifier, &out.slack)?;
        rising = if r > *out.val_risks.last().expect("nonempty") { rising + 1 } else { 0 };
        out.val_risks.push(r);
        if rising >= 5 {
            out.classifier = w.clone();
            out.slack = slack.clone();
            out.reverted = true;
            break;
        }
    }
    Ok(out)
}

/// Gradient of the batch's revised forward-corrected risk with respect to the slack.
fn slack_gradient(
    w: &NetworkParams,
    batch: &Batch,
    base: &[TransitionMatrix],
    revised: &[TransitionMatrix],
    slack: &RevisionSlack,
) -> Result<Vec<f64>> {
    let c = slack.classes;
    let n = batch.len() as f64;
    let mut total = vec![0.0; c * c];
    for i in 0..batch.len() {
        let p = nn::softmax(&w.logits(batch.inputs.row(i))?);
        let q = nn::mix_through(&p, &revised[i]);
        let gq = nn::log_grad(&q, batch.targets.row(i));
        let scale = batch.weights[i] / n;
        let d_revised: Vec<f64> = (0..c * c).map(|k| scale * p[k / c] * gq[k % c]).collect();
        for (t, g) in total.iter_mut().zip(transition::revise_backward(&base[i], slack, &d_revised)) {
            *t += g;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_mixture, GaussianMixtureSpec};

    fn tiny_cfg(epochs: usize, seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            epochs,
            hidden: vec![8],
            seed,
            ..TrainRunConfig::default()
        }
    }

    fn labelled(n: usize, seed: u64) -> LabeledDataset {
        let mut d = generate_mixture(&GaussianMixtureSpec::ring(3, 2.5, 1.0), n, seed).unwrap();
        d.noisy_labels = Some(d.clean_labels.clone());
        d
    }

    #[test]
    fn r2_hand_example() {
        // f = [0.6, 0.4] from bias logits ln(1.5), 0.
        let w = NetworkParams::new(
            vec![nn::Layer {
                in_dim: 1,
                out_dim: 2,
                weights: vec![0.0, 0.0],
                bias: vec![1.5f64.ln(), 0.0],
                activation: nn::Activation::Identity,
            }],
            Head::Softmax,
        )
        .unwrap();
        let t = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let q = nn::mix_through(&[0.6, 0.4], &t);
        assert!((q[0] - 0.62).abs() < 1e-15 && (q[1] - 0.38).abs() < 1e-15);
        let x = Matrix::new(1, 1, vec![0.0]).unwrap();
        let r = risk_with_table(&w, &x, &[0], Some(&[t]), 2).unwrap();
        assert!((r + 0.62f64.ln()).abs() < 1e-12);
        assert!((r - 0.4780).abs() < 1e-4);
    }

    #[test]
    fn identity_correction_equals_cross_entropy_bitwise() {
        let w = NetworkParams::init(&[2, 6, 3], Head::Softmax, 2).unwrap();
        let d = labelled(64, 1);
        let ce = corrected_risk(&w, &d, &Correction::Identity).unwrap();
        let id = corrected_risk(&w, &d, &Correction::Global(TransitionMatrix::identity(3))).unwrap();
        assert_eq!(ce.to_bits(), id.to_bits());
    }

    #[test]
    fn perfect_prediction_through_matrix_is_free() {
        let w = NetworkParams::new(
            vec![nn::Layer {
                in_dim: 1,
                out_dim: 2,
                weights: vec![0.0, 0.0],
                bias: vec![60.0, 0.0],
                activation: nn::Activation::Identity,
            }],
            Head::Softmax,
        )
        .unwrap();
        let t = TransitionMatrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let x = Matrix::new(1, 1, vec![0.0]).unwrap();
        assert!(risk_with_table(&w, &x, &[1], Some(&[t]), 2).unwrap() < 1e-20);
    }

    #[test]
    fn zero_epochs_returns_initialization_only() {
        let d = labelled(50, 2);
        let h = train_classifier(&d, &d, &Correction::Identity, &tiny_cfg(0, 4), None).unwrap();
        assert_eq!(h.checkpoints.len(), 1);
        assert_eq!(h.checkpoints[0], NetworkParams::init(&[2, 8, 3], Head::Softmax, 4).unwrap());
    }

    #[test]
    fn different_shuffles_both_descend() {
        let d = labelled(600, 3);
        let v = labelled(200, 4);
        let t = TransitionMatrix::from_rows(&[
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        let mut finals = Vec::new();
        for seed in [10, 11] {
            let h = train_classifier(&d, &v, &Correction::Global(t.clone()), &tiny_cfg(5, seed), None).unwrap();
            let r = h.val_risks();
            assert!(r.last().unwrap() < &r[0]);
            finals.push(h.checkpoints.last().unwrap().clone());
        }
        assert_ne!(finals[0], finals[1]);
    }

    #[test]
    fn training_is_deterministic_and_leaves_theta_alone() {
        let d = labelled(300, 5);
        let theta = NetworkParams::init(&[2, 4, 9], Head::RowSoftmax { classes: 3 }, 8).unwrap();
        let before = theta.clone();
        let a = train_classifier(&d, &d, &Correction::Instance(&theta), &tiny_cfg(2, 1), Some(&d)).unwrap();
        let b = train_classifier(&d, &d, &Correction::Instance(&theta), &tiny_cfg(2, 1), Some(&d)).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.records, b.records);
        assert_eq!(theta, before);
        assert!(a.records[2].test_acc_vs_bayes.is_some());
    }

    #[test]
    fn selection_rules() {
        assert_eq!(argmin_earliest(&[0.9, 0.5, 0.7]), 1);
        assert_eq!(argmin_earliest(&[0.4, 0.3, 0.3]), 1);
        assert_eq!(argmin_earliest(&[0.2]), 0);
        let d = labelled(40, 6);
        let only = NetworkParams::init(&[2, 3], Head::Softmax, 1).unwrap();
        let (k, w) = select_model(std::slice::from_ref(&only), &d, &Correction::Identity).unwrap();
        assert_eq!((k, w), (0, only.clone()));
        let (k, _) = select_model(&[only.clone(), only.clone()], &d, &Correction::Identity).unwrap();
        assert_eq!(k, 0);
    }

    #[test]
    fn revision_with_zero_epochs_is_identity() {
        let d = labelled(50, 7);
        let w = NetworkParams::init(&[2, 8, 3], Head::Softmax, 1).unwrap();
        let mut cfg = tiny_cfg(1, 1);
        cfg.revision.epochs = 0;
        let out = finetune_revision(&w, &RevisionSlack::zeros(3), &Correction::Identity, &d, &cfg).unwrap();
        assert_eq!(out.classifier, w);
        assert_eq!(out.slack, RevisionSlack::zeros(3));
        assert!(!out.reverted);
    }

    #[test]
    fn frozen_slack_matches_plain_continuation() {
        let d = labelled(300, 8);
        let theta = NetworkParams::init(&[2, 4, 9], Head::RowSoftmax { classes: 3 }, 2).unwrap();
        let w = NetworkParams::init(&[2, 8, 3], Head::Softmax, 1).unwrap();
        let mut cfg = tiny_cfg(1, 3);
        cfg.revision.epochs = 3;
        cfg.revision.freeze_slack = true;
        let corr = Correction::Instance(&theta);
        let out = finetune_revision(&w, &RevisionSlack::zeros(3), &corr, &d, &cfg).unwrap();
        let cont = continue_training(&w, &d, &corr, &cfg, 3).unwrap();
        assert_eq!(out.classifier, cont);
        assert_eq!(out.slack, RevisionSlack::zeros(3));
    }

    #[test]
    fn slack_gradient_matches_finite_differences() {
        let d = labelled(20, 9);
        let w = NetworkParams::init(&[2, 5, 3], Head::Softmax, 6).unwrap();
        let theta = NetworkParams::init(&[2, 4, 9], Head::RowSoftmax { classes: 3 }, 7).unwrap();
        let base = transition::transition_forward_all(&theta, &d.features).unwrap();
        let mut slack = RevisionSlack::zeros(3);
        slack.delta = vec![0.02, -0.05, 0.1, 0.0, 0.03, -0.02, 0.07, 0.01, -0.04];
        let batch = Batch::one_hot(d.features.clone(), d.noisy().unwrap(), 3).unwrap();
        let objective = |s: &RevisionSlack| {
            let mats = revised_table(&base, s);
            nn::loss(&w, &batch, LossSpec::ForwardCorrected(&mats)).unwrap()
        };
        let g = slack_gradient(&w, &batch, &base, &revised_table(&base, &slack), &slack).unwrap();
        let eps = 1e-6;
        for k in 0..9 {
            let (mut up, mut down) = (slack.clone(), slack.clone());
            up.delta[k] += eps;
            down.delta[k] -= eps;
            let fd = (objective(&up) - objective(&down)) / (2.0 * eps);
            assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn slack_stays_bounded() {
        let d = labelled(200, 10);
        let w = NetworkParams::init(&[2, 8, 3], Head::Softmax, 1).unwrap();
        let mut cfg = tiny_cfg(1, 1);
        cfg.revision.epochs = 4;
        cfg.revision.lr = 0.5;
        let out = finetune_revision(&w, &RevisionSlack::zeros(3), &Correction::Identity, &d, &cfg).unwrap();
        assert!(out.slack.delta.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
