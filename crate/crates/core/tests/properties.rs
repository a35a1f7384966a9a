//! Structural invariants checked over generated inputs.

use btlab_core::classifier::Correction;
use btlab_core::data::{self, flip_row, GaussianMixtureSpec, NoiseModel};
use btlab_core::distill::{self, DistilledSet};
use btlab_core::metrics::{self, row_l1};
use btlab_core::nn::{self, Head, NetworkParams};
use btlab_core::transition::{self, RevisionSlack};
use btlab_core::{Matrix, TransitionMatrix};
use proptest::prelude::*;

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
    })
}

fn inputs(rows: usize, dim: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-50.0f64..50.0, rows * dim).prop_map(move |v| Matrix::new(rows, dim, v).unwrap())
}

proptest! {
    #[test]
    fn classifier_outputs_are_distributions(seed in any::<u64>(), x in inputs(6, 3), scale in 0.1f64..20.0) {
        let mut net = NetworkParams::init(&[3, 7, 4], Head::Softmax, seed).unwrap();
        for l in net.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w *= scale);
        }
        let p = nn::forward_probs(&net, &x).unwrap();
        for row in p.iter_rows() {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn transition_rows_are_distributions(seed in any::<u64>(), x in inputs(4, 2), c in 2usize..6) {
        let theta = NetworkParams::init(&[2, 5, c * c], Head::RowSoftmax { classes: c }, seed).unwrap();
        for t in transition::transition_forward_all(&theta, &x).unwrap() {
            for i in 0..c {
                prop_assert!(t.row(i).iter().all(|v| *v >= 0.0));
                prop_assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generated_rows_keep_exact_diagonal(
        proj in prop::collection::vec(-30.0f64..30.0, 2..7),
        q in 0.0f64..0.6,
        pick in any::<prop::sample::Index>(),
    ) {
        let y = pick.index(proj.len());
        let row = flip_row(&proj, y, q);
        prop_assert_eq!(row[y], 1.0 - q);
        let off: f64 = row.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| v).sum();
        prop_assert!((off - q).abs() < 1e-9);
        prop_assert!(row.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn row_distance_is_symmetric_and_bounded(a in distribution(5), b in distribution(5)) {
        let (ab, ba) = (row_l1(&a, &b), row_l1(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn revised_matrices_stay_stochastic(
        rows in prop::collection::vec(distribution(3), 3),
        delta in prop::collection::vec(-3.0f64..3.0, 9),
    ) {
        let t = TransitionMatrix::from_rows(&rows).unwrap();
        let mut slack = RevisionSlack { classes: 3, delta };
        slack.clamp();
        prop_assert!(slack.delta.iter().all(|v| (-1.0..=1.0).contains(v)));
        let r = transition::revise_matrix(&t, &slack);
        for i in 0..3 {
            prop_assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_identity_two_ways(p in distribution(4), rows in prop::collection::vec(distribution(4), 4)) {
        let t = TransitionMatrix::from_rows(&rows).unwrap();
        let q = nn::mix_through(&p, &t);
        for (j, qj) in q.iter().enumerate() {
            let explicit: f64 = (0..4).map(|i| t.get(i, j) * p[i]).sum();
            prop_assert!((qj - explicit).abs() < 1e-12);
        }
    }

    #[test]
    fn admission_shrinks_with_rho(
        rows in prop::collection::vec(distribution(3), 1..40),
        lo in 0.0f64..0.9,
        step in 0.0f64..0.09,
    ) {
        let n = rows.len();
        let post = Matrix::from_rows(&rows, 3).unwrap();
        let mut d = data::generate_mixture(&GaussianMixtureSpec::ring(3, 2.0, 1.0), n, 1).unwrap();
        d.noisy_labels = Some(vec![0; n]);
        let a = distill::collect_from_posteriors(&d, &post, lo).unwrap();
        let b = distill::collect_from_posteriors(&d, &post, lo + step).unwrap();
        prop_assert!(b.indices.iter().all(|i| a.indices.contains(i)));
    }

    #[test]
    fn class_dependent_rows_are_distributions(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..60)) {
        let n = pairs.len();
        let set = DistilledSet {
            indices: (0..n).collect(),
            features: Matrix::zeros(n, 1),
            noisy_labels: pairs.iter().map(|p| p.1).collect(),
            bayes_hat: pairs.iter().map(|p| p.0).collect(),
            admit_posterior: vec![0.9; n],
            threshold: 0.65,
            num_classes: 4,
        };
        let (t, _) = metrics::class_dependent_matrix(&set).unwrap();
        for i in 0..4 {
            prop_assert!(t.row(i).iter().all(|v| *v > 0.0));
            prop_assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inversion_round_trips(rows in prop::collection::vec(distribution(3), 3), v in distribution(3), q in 0.0f64..0.4) {
        let mixed: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (0..3).map(|j| q * r[j] + if i == j { 1.0 - q } else { 0.0 }).collect())
            .collect();
        let t = TransitionMatrix::from_rows(&mixed).unwrap();
        let p = transition::invert_posterior(&t, &v).unwrap();
        let back = t.transpose_mul(&p);
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn oracle_posteriors_match_injection_rows() {
    let spec = GaussianMixtureSpec::ring(3, 2.5, 1.0);
    let clean = data::generate_mixture(&spec, 500, 4).unwrap();
    let cfg = data::NoiseGenConfig::default();
    let noisy = data::inject_idn_noise(&clean, &cfg).unwrap();
    let model = NoiseModel::sample(2, 3, cfg.projection_seed);
    let q = noisy.flip_rates.as_ref().unwrap();
    let truth = noisy.true_rows().unwrap();
    for i in 0..noisy.len() {
        let t = model.matrix(noisy.features.row(i), q[i]);
        assert_eq!(t.row(noisy.clean_labels[i]), truth.row(i));
    }
    let err = metrics::transition_row_l1(
        &Correction::Global(TransitionMatrix::uniform(3)),
        &noisy,
        metrics::RowSubset::All,
    )
    .unwrap()
    .unwrap();
    assert!(err > 0.0 && err <= 2.0);
}
