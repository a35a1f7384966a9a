//! Small dense networks with exact gradients for the three losses the
//! pipeline trains: plain cross-entropy, forward-corrected cross-entropy and
//! the selected-row cross-entropy of the transition network.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::transition::TransitionMatrix;

/// Lower clamp applied to every probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Current checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// How the final logits are turned into probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// One softmax over all outputs.
    Softmax,
    /// `classes * classes` outputs, softmax applied per row of the reshaped matrix.
    RowSoftmax { classes: usize },
}

/// Dense layer; `weights` is row-major with shape `(out_dim, in_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let z = row.iter().zip(input).fold(*b, |acc, (w, x)| acc + w * x);
            out.push(match self.activation {
                Activation::Relu => z.max(0.0),
                Activation::Identity => z,
            });
        }
    }
}

/// Feed-forward network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    head: Head,
}

impl NetworkParams {
    pub fn new(layers: Vec<Layer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.in_dim == 0 || layer.out_dim == 0 {
                return Err(Error::config(format!("layer {k} has a zero dimension")));
            }
            if layer.weights.len() != layer.in_dim * layer.out_dim
                || layer.bias.len() != layer.out_dim
            {
                return Err(Error::config(format!(
                    "layer {k} arrays do not match its {}x{} shape",
                    layer.out_dim, layer.in_dim
                )));
            }
            if let Some(next) = layers.get(k + 1) {
                if next.in_dim != layer.out_dim {
                    return Err(Error::config(format!(
                        "layer {} expects {} inputs but layer {k} emits {}",
                        k + 1,
                        next.in_dim,
                        layer.out_dim
                    )));
                }
            }
            if !layer.weights.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    layer: k,
                    detail: "non-finite parameter".into(),
                });
            }
        }
        let out = layers.last().map(|l| l.out_dim).unwrap_or_default();
        if let Head::RowSoftmax { classes } = head {
            if classes * classes != out {
                return Err(Error::config(format!(
                    "row-softmax head for {classes} classes needs {} outputs, network has {out}",
                    classes * classes
                )));
            }
        }
        Ok(Self { layers, head })
    }

    /// Glorot-uniform weights, zero biases, ReLU between layers and identity at the output.
    ///
    /// `dims` lists the input width, every hidden width, and the output width.
    pub fn init(dims: &[usize], head: Head, seed: u64) -> Result<Self> {
        Self::build(dims, head, |in_dim, out_dim, k| {
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let mut rng = rng::stream(seed, k as u64);
            (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect()
        })
    }

    pub fn zeros(dims: &[usize], head: Head) -> Result<Self> {
        Self::build(dims, head, |i, o, _| vec![0.0; i * o])
    }

    fn build(
        dims: &[usize],
        head: Head,
        mut weights: impl FnMut(usize, usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("network dims need an input and an output width"));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Layer {
                in_dim: w[0],
                out_dim: w[1],
                weights: weights(w[0], w[1], k),
                bias: vec![0.0; w[1]],
                activation: if k == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::new(layers, head)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input has width {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::input("non-finite network input"));
        }
        Ok(())
    }

    /// Final-layer outputs for one input.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(x)?.pop().expect("at least one layer"))
    }

    /// Input followed by every layer's output.
    fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.affine(&acts[k], &mut out);
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    layer: k,
                    detail: "non-finite activation".into(),
                });
            }
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layer_dims: self.layer_dims(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
            head: self.head,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::input(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let n = ckpt.layer_dims.len().saturating_sub(1);
        if ckpt.activations.len() != n || ckpt.weights.len() != n || ckpt.biases.len() != n {
            return Err(Error::input(
                "checkpoint arrays disagree with layer_dims length",
            ));
        }
        let layers = ckpt
            .weights
            .into_iter()
            .zip(ckpt.biases)
            .zip(ckpt.activations)
            .enumerate()
            .map(|(k, ((weights, bias), activation))| Layer {
                in_dim: ckpt.layer_dims[k],
                out_dim: ckpt.layer_dims[k + 1],
                weights,
                bias,
                activation,
            })
            .collect();
        Self::new(layers, ckpt.head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }

    /// Parameters flattened in optimizer order (weights then bias, per layer).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

/// Versioned JSON form of [`NetworkParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub head: Head,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax output of the network for every input row.
pub fn forward_probs(params: &NetworkParams, inputs: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(inputs.rows(), params.output_dim());
    for (i, x) in inputs.iter_rows().enumerate() {
        let p = softmax(&params.logits(x)?);
        out.row_mut(i).copy_from_slice(&p);
    }
    Ok(out)
}

/// Inputs with target distributions and per-instance weights.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix, weights: Vec<f64>) -> Result<Self> {
        if inputs.rows() != targets.rows() || weights.len() != inputs.rows() {
            return Err(Error::input(format!(
                "batch has {} inputs, {} targets and {} weights",
                inputs.rows(),
                targets.rows(),
                weights.len()
            )));
        }
        for (i, t) in targets.iter_rows().enumerate() {
            let sum: f64 = t.iter().sum();
            if t.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::input(format!(
                    "target row {i} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            inputs,
            targets,
            weights,
        })
    }

    /// Unit-weight batch with one-hot targets.
    pub fn one_hot(inputs: Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        let mut targets = Matrix::zeros(labels.len(), classes);
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::input(format!(
                    "label {y} at row {i} is outside 0..{classes}"
                )));
            }
            targets.row_mut(i)[y] = 1.0;
        }
        let n = labels.len();
        Self::new(inputs, targets, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-row cross-entropy `-sum_j t_j log(clamp(p_j))`.
///
/// Every loss in the crate goes through this function so that identical
/// predictions give bit-identical losses.
#[inline]
pub fn row_cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    let mut loss = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if *t != 0.0 {
            loss -= t * p.clamp(PROB_FLOOR, 1.0).ln();
        }
    }
    loss
}

/// Weighted mean of per-row losses, `sum_i w_i l_i / n`.
fn weighted_mean(losses: impl Iterator<Item = f64>, weights: &[f64]) -> f64 {
    let n = weights.len();
    if n == 0 {
        return 0.0;
    }
    losses.zip(weights).map(|(l, w)| w * l).sum::<f64>() / n as f64
}

/// Mean cross-entropy of `probs` against the batch targets.
pub fn cross_entropy(probs: &Matrix, batch: &Batch) -> Result<f64> {
    if probs.rows() != batch.len() || probs.cols() != batch.targets.cols() {
        return Err(Error::input(format!(
            "probabilities are {}x{}, targets are {}x{}",
            probs.rows(),
            probs.cols(),
            batch.len(),
            batch.targets.cols()
        )));
    }
    Ok(weighted_mean(
        probs
            .iter_rows()
            .zip(batch.targets.iter_rows())
            .map(|(p, t)| row_cross_entropy(p, t)),
        &batch.weights,
    ))
}

/// `p^T T`: the noisy-label distribution implied by a class posterior and a
/// transition matrix.
#[inline]
pub fn mix_through(p: &[f64], t: &TransitionMatrix) -> Vec<f64> {
    let c = t.classes();
    let mut q = vec![0.0; c];
    for (i, pi) in p.iter().enumerate() {
        for (qj, tij) in q.iter_mut().zip(t.row(i)) {
            *qj += pi * tij;
        }
    }
    q
}

/// Objective whose gradient [`grad_params`] computes.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    /// Softmax cross-entropy against the batch targets.
    CrossEntropy,
    /// Cross-entropy of `softmax(logits)^T T_i` against the targets, one matrix per instance.
    ForwardCorrected(&'a [TransitionMatrix]),
    /// Row-softmax head: cross-entropy of row `rows[i]` of the predicted matrix.
    SelectedRow(&'a [usize]),
}

impl LossSpec<'_> {
    fn check(&self, params: &NetworkParams, batch: &Batch) -> Result<()> {
        let c = batch.targets.cols();
        match self {
            LossSpec::CrossEntropy => {
                if params.output_dim() != c {
                    return Err(Error::config("network width differs from target width"));
                }
            }
            LossSpec::ForwardCorrected(ts) => {
                if params.output_dim() != c || ts.len() != batch.len() {
                    return Err(Error::config(
                        "forward correction needs one C x C matrix per instance",
                    ));
                }
                if let Some(t) = ts.iter().find(|t| t.classes() != c) {
                    return Err(Error::config(format!(
                        "transition matrix has {} classes, targets have {c}",
                        t.classes()
                    )));
                }
            }
            LossSpec::SelectedRow(rows) => {
                if params.output_dim() != c * c || rows.len() != batch.len() {
                    return Err(Error::config(
                        "selected-row loss needs C*C outputs and one row index per instance",
                    ));
                }
                if let Some(r) = rows.iter().find(|&&r| r >= c) {
                    return Err(Error::input(format!("row index {r} is outside 0..{c}")));
                }
            }
        }
        Ok(())
    }

    /// Loss for instance `i` and its gradient with respect to the logits.
    fn row_loss_and_grad(&self, i: usize, logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let c = target.len();
        match self {
            LossSpec::CrossEntropy => {
                let p = softmax(logits);
                let loss = row_cross_entropy(&p, target);
                let g = log_grad(&p, target);
                (loss, softmax_backward(&p, &g))
            }
            LossSpec::ForwardCorrected(ts) => {
                let p = softmax(logits);
                let q = mix_through(&p, &ts[i]);
                let loss = row_cross_entropy(&q, target);
                let gq = log_grad(&q, target);
                let gp: Vec<f64> = (0..c)
                    .map(|a| ts[i].row(a).iter().zip(&gq).map(|(t, g)| t * g).sum())
                    .collect();
                (loss, softmax_backward(&p, &gp))
            }
            LossSpec::SelectedRow(rows) => {
                let r = rows[i];
                let block = &logits[r * c..(r + 1) * c];
                let p = softmax(block);
                let loss = row_cross_entropy(&p, target);
                let g = softmax_backward(&p, &log_grad(&p, target));
                let mut full = vec![0.0; logits.len()];
                full[r * c..(r + 1) * c].copy_from_slice(&g);
                (loss, full)
            }
        }
    }
}

/// Gradient of `-sum_j t_j log(clamp(p_j))` with respect to `p`.
#[inline]
pub(crate) fn log_grad(p: &[f64], target: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(target)
        .map(|(p, t)| {
            if *t != 0.0 && *p >= PROB_FLOOR && *p <= 1.0 {
                -t / p
            } else {
                0.0
            }
        })
        .collect()
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
#[inline]
fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Gradient arrays congruent with a [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Mean loss of the network on a batch.
pub fn loss(params: &NetworkParams, batch: &Batch, spec: LossSpec<'_>) -> Result<f64> {
    spec.check(params, batch)?;
    let mut losses = Vec::with_capacity(batch.len());
    for (i, (x, t)) in batch
        .inputs
        .iter_rows()
        .zip(batch.targets.iter_rows())
        .enumerate()
    {
        let logits = params.logits(x)?;
        losses.push(spec.row_loss_and_grad(i, &logits, t).0);
    }
    Ok(weighted_mean(losses.into_iter(), &batch.weights))
}

/// Mean loss and its exact gradient by backpropagation.
pub fn grad_params(
    params: &NetworkParams,
    batch: &Batch,
    spec: LossSpec<'_>,
) -> Result<(f64, Gradients)> {
    spec.check(params, batch)?;
    let n = batch.len();
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    for (i, (x, t)) in batch
        .inputs
        .iter_rows()
        .zip(batch.targets.iter_rows())
        .enumerate()
    {
        let acts = params.activations(x)?;
        let (row_loss, dlogits) = spec.row_loss_and_grad(i, acts.last().expect("layers"), t);
        let w = batch.weights[i];
        total += w * row_loss;
        let scale = w / n as f64;
        let mut delta: Vec<f64> = dlogits.into_iter().map(|g| g * scale).collect();
        for k in (0..params.layers.len()).rev() {
            let layer = &params.layers[k];
            let input = &acts[k];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grads.weights[k][o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grads.bias[k][o] += d;
            }
            if k == 0 {
                break;
            }
            let below = params.layers[k - 1].activation;
            let mut prev = vec![0.0; layer.in_dim];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if below == Activation::Relu {
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            if let Some(bad) = prev.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: k,
                    detail: format!("non-finite backpropagated gradient at unit {bad}"),
                });
            }
            delta = prev;
        }
    }
    let mean = if n == 0 { 0.0 } else { total / n as f64 };
    if !mean.is_finite() {
        return Err(Error::Numeric {
            layer: params.layers.len() - 1,
            detail: "non-finite loss".into(),
        });
    }
    Ok((mean, grads))
}

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v <- mu v + g`, `x <- x - lr v`.
    Sgd {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::Sgd {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer hyperparameters plus per-tensor auxiliary arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Velocity (SGD) or first moment (Adam).
    first: Vec<Vec<f64>>,
    /// Second moment (Adam only).
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            first: zeros(),
            second,
            step: 0,
        }
    }

    pub fn for_params(kind: OptimizerKind, params: &NetworkParams) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(kind, &shapes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to a list of parameter tensors.
    pub fn step_tensors(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::config("optimizer state does not match parameter tensors"));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != p.len() {
                return Err(Error::config(format!(
                    "tensor {k} shape differs from optimizer state"
                )));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((x, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        let g = g + weight_decay * *x;
                        *v = momentum * *v + g;
                        *x -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((x, g), m), v) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let g = g + weight_decay * *x;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        let g = grads.tensors();
        self.step_tensors(&mut params.tensors_mut(), &g)
    }
}

/// Functional form of one optimizer update.
pub fn optimizer_step(
    params: &NetworkParams,
    grads: &Gradients,
    state: &OptimizerState,
) -> Result<(NetworkParams, OptimizerState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    state.step(&mut params, grads)?;
    Ok((params, state))
}

/// Shuffled minibatch index lists for one epoch.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}
