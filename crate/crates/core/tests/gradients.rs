//! Central finite differences against the analytic gradients of the three risks.

use btlab_core::classifier;
use btlab_core::distill::DistilledSet;
use btlab_core::nn::{self, Activation, Batch, Gradients, Head, LossSpec, NetworkParams};
use btlab_core::rng;
use btlab_core::transition;
use btlab_core::Matrix;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_net(r: &mut ChaCha8Rng, input: usize, output: usize, head: Head) -> NetworkParams {
    let mut dims = vec![input];
    for _ in 0..r.random_range(0..=2) {
        dims.push(r.random_range(1..=16));
    }
    dims.push(output);
    let mut net = NetworkParams::init(&dims, head, r.random()).unwrap();
    for l in net.layers_mut() {
        for b in &mut l.bias {
            *b = 0.3 * gauss(r);
        }
    }
    net
}

/// Smallest |pre-activation| over every ReLU unit and row.
fn kink_distance(net: &NetworkParams, x: &Matrix) -> f64 {
    let mut closest = f64::INFINITY;
    for row in x.iter_rows() {
        let mut h = row.to_vec();
        for l in net.layers() {
            let pre: Vec<f64> = (0..l.out_dim)
                .map(|o| l.bias[o] + (0..l.in_dim).map(|k| l.weights[o * l.in_dim + k] * h[k]).sum::<f64>())
                .collect();
            if l.activation == Activation::Relu {
                closest = pre.iter().fold(closest, |m, v| m.min(v.abs()));
                h = pre.iter().map(|v| v.max(0.0)).collect();
            } else {
                h = pre;
            }
        }
    }
    closest
}

/// Inputs redrawn until no ReLU sits within 1e-3 of its kink, where a
/// central difference would straddle the nondifferentiable point.
fn random_inputs(r: &mut ChaCha8Rng, n: usize, d: usize, nets: &[&NetworkParams]) -> Matrix {
    loop {
        let x = Matrix::new(n, d, (0..n * d).map(|_| 1.5 * gauss(r)).collect()).unwrap();
        if nets.iter().all(|net| kink_distance(net, &x) > 1e-3) {
            return x;
        }
    }
}

fn max_rel_error(params: &NetworkParams, grads: &Gradients, f: impl Fn(&NetworkParams) -> f64) -> f64 {
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (t, g) in analytic.iter().enumerate() {
        for (k, &a) in g.iter().enumerate() {
            let mut up = params.clone();
            up.tensors_mut()[t][k] += EPS;
            let mut down = params.clone();
            down.tensors_mut()[t][k] -= EPS;
            let numeric = (f(&up) - f(&down)) / (2.0 * EPS);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn check_ce(seed: u64) -> f64 {
    let mut r = rng::stream(seed, 0);
    let (d, c, n) = (r.random_range(1..=4), r.random_range(2..=5), r.random_range(1..=8));
    let w = random_net(&mut r, d, c, Head::Softmax);
    let x = random_inputs(&mut r, n, d, &[&w]);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let mut batch = Batch::one_hot(x, &labels, c).unwrap();
    batch.weights = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
    let (_, g) = nn::grad_params(&w, &batch, LossSpec::CrossEntropy).unwrap();
    max_rel_error(&w, &g, |p| {
        nn::cross_entropy(&nn::forward_probs(p, &batch.inputs).unwrap(), &batch).unwrap()
    })
}

fn check_r1(seed: u64) -> f64 {
    let mut r = rng::stream(seed, 1);
    let (d, c, n) = (r.random_range(1..=4), r.random_range(2..=4), r.random_range(1..=8));
    let theta = random_net(&mut r, d, c * c, Head::RowSoftmax { classes: c });
    let x = random_inputs(&mut r, n, d, &[&theta]);
    let set = DistilledSet {
        indices: (0..n).collect(),
        features: x,
        noisy_labels: (0..n).map(|_| r.random_range(0..c)).collect(),
        bayes_hat: (0..n).map(|_| r.random_range(0..c)).collect(),
        admit_posterior: vec![0.9; n],
        threshold: 0.65,
        num_classes: c,
    };
    let batch = Batch::one_hot(set.features.clone(), &set.noisy_labels, c).unwrap();
    let (_, g) = nn::grad_params(&theta, &batch, LossSpec::SelectedRow(&set.bayes_hat)).unwrap();
    max_rel_error(&theta, &g, |p| transition::risk_r1(p, &set).unwrap())
}

fn check_r2(seed: u64) -> f64 {
    let mut r = rng::stream(seed, 2);
    let (d, c, n) = (r.random_range(1..=4), r.random_range(2..=4), r.random_range(1..=8));
    let w = random_net(&mut r, d, c, Head::Softmax);
    let theta = random_net(&mut r, d, c * c, Head::RowSoftmax { classes: c });
    let x = random_inputs(&mut r, n, d, &[&w, &theta]);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let table = transition::transition_forward_all(&theta, &x).unwrap();
    let batch = Batch::one_hot(x.clone(), &labels, c).unwrap();
    let (_, g) = nn::grad_params(&w, &batch, LossSpec::ForwardCorrected(&table)).unwrap();
    max_rel_error(&w, &g, |p| classifier::risk_r2(p, &theta, &x, &labels).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cross_entropy_gradient_matches_differences(seed in any::<u64>()) {
        prop_assert!(check_ce(seed) < TOL);
    }

    #[test]
    fn selected_row_gradient_matches_differences(seed in any::<u64>()) {
        prop_assert!(check_r1(seed) < TOL);
    }

    #[test]
    fn corrected_gradient_matches_differences(seed in any::<u64>()) {
        prop_assert!(check_r2(seed) < TOL);
    }
}
