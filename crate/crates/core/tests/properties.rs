use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedclass::data::{self, Dataset, PartitionSpec};
use fedclass::distill::{self, ClassSplit};
use fedclass::federation;
use fedclass::incremental::{self, ExemplarMemory, HeadInit};
use fedclass::metrics;
use fedclass::tensor::{self, Matrix, ModelParams};

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-30.0f64..30.0, 1..=max_len)
}

fn theta() -> impl Strategy<Value = f64> {
    0.1f64..10.0
}

/// Historical and current logits for `old` and `old + new` classes.
fn split_logits() -> impl Strategy<Value = (ClassSplit, Vec<f64>, Vec<f64>)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(old, new)| {
        (
            Just(ClassSplit { old, new }),
            vec(-20.0f64..20.0, old),
            vec(-20.0f64..20.0, old + new),
        )
    })
}

fn row_keys(ds: &Dataset) -> Vec<(Vec<u64>, usize)> {
    let mut keys: Vec<(Vec<u64>, usize)> = ds
        .inputs()
        .iter_rows()
        .zip(ds.labels())
        .map(|(r, &y)| (r.iter().map(|v| v.to_bits()).collect(), y))
        .collect();
    keys.sort();
    keys
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_is_a_distribution(x in logits(12), t in theta(), shift in -50.0f64..50.0) {
        let p = tensor::softmax_temp(&x, t).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let p2 = tensor::softmax_temp(&shifted, t).unwrap();
        for (a, b) in p.as_slice().iter().zip(p2.as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(
        (a, b) in (1usize..=10).prop_flat_map(|n| (vec(-10.0f64..10.0, n), vec(-10.0f64..10.0, n))),
        t in theta(),
    ) {
        let p = tensor::softmax_temp(&a, t).unwrap();
        let q = tensor::softmax_temp(&b, t).unwrap();
        prop_assert!(tensor::kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(tensor::kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn augmented_target_keeps_mass_and_structure((split, hist, curr) in split_logits(), t in theta()) {
        let z = distill::augment_scores(&hist, &curr, split, t).unwrap();
        let z = z.as_slice();
        let s = tensor::softmax_temp(&curr, t).unwrap();
        let q = tensor::softmax_temp(&hist, t).unwrap();
        prop_assert!((z.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&z[split.old..], &s.as_slice()[split.old..]);
        let old_mass: f64 = z[..split.old].iter().sum();
        let new_mass: f64 = s.as_slice()[split.old..].iter().sum();
        prop_assert!((old_mass - (1.0 - new_mass)).abs() < 1e-12);
        for j in 0..split.old {
            prop_assert!((z[j] - q.as_slice()[j] * old_mass).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_target_matches_conditional_derivation((split, hist, curr) in split_logits(), t in theta()) {
        let z = distill::augment_scores(&hist, &curr, split, t).unwrap();
        let oracle = distill::theorem_oracle(
            &tensor::softmax_temp(&hist, t).unwrap(),
            &tensor::softmax_temp(&curr, t).unwrap(),
        )
        .unwrap();
        for (a, b) in z.as_slice().iter().zip(oracle.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_is_a_convex_combination(
        sizes in vec(1usize..50, 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let models: Vec<ModelParams> = sizes
            .iter()
            .map(|_| ModelParams::init(&[3, 4, 2], &mut rng).unwrap())
            .collect();
        let avg = federation::aggregate(&models, &sizes).unwrap();
        let weights = federation::aggregation_weights(&sizes).unwrap();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (i, v) in avg.values().enumerate() {
            let column: Vec<f64> = models.iter().map(|m| *m.values().nth(i).unwrap()).collect();
            let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
        let same = federation::aggregate(&vec![models[0].clone(); sizes.len()], &sizes).unwrap();
        prop_assert!(same.max_abs_diff(&models[0]).unwrap() <= 1e-15);
    }

    #[test]
    fn partition_places_every_sample_once(
        clients in 1usize..8,
        alpha in 0.05f64..5.0,
        seed in any::<u64>(),
    ) {
        let ds = data::generate_synthetic(4, 30, 3, 2.0, 5).unwrap();
        let spec = PartitionSpec { clients, alpha, seed };
        match data::dirichlet_partition(&ds, &spec) {
            Ok(shards) => {
                prop_assert_eq!(shards.len(), clients);
                prop_assert!(shards.iter().all(|s| !s.is_empty()));
                let mut joined = Dataset::empty(3, 4);
                for s in &shards {
                    joined = joined.concat(s).unwrap();
                }
                prop_assert_eq!(row_keys(&joined), row_keys(&ds));
            }
            // tiny alpha with many clients may never avoid an empty shard
            Err(e) => prop_assert!(alpha < 0.5, "unexpected failure {e}"),
        }
    }

    #[test]
    fn largest_remainder_conserves_the_total(
        raw in vec(0.0f64..1.0, 1..10),
        total in 0usize..1000,
    ) {
        let sum: f64 = raw.iter().sum();
        prop_assume!(sum > 0.0);
        let props: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let counts = data::largest_remainder(&props, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, p) in counts.iter().zip(&props) {
            prop_assert!((*c as f64 - p * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn head_extension_leaves_old_outputs_unchanged(
        new_classes in 1usize..5,
        gaussian in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelParams::init(&[4, 6, 3], &mut rng).unwrap();
        let init = if gaussian { HeadInit::Gaussian { std: 0.1 } } else { HeadInit::Zero };
        let wide = incremental::extend_head(&model, new_classes, init, seed).unwrap();
        prop_assert_eq!(wide.output_dim(), 3 + new_classes);
        let x = Matrix::from_vec(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let before = model.forward(&x).unwrap();
        let after = wide.forward(&x).unwrap();
        for r in 0..5 {
            prop_assert_eq!(&after.row(r)[..3], before.row(r));
        }
    }

    #[test]
    fn memory_is_bounded_and_balanced(m in 0usize..60, seed in any::<u64>()) {
        let prior = data::generate_synthetic(3, 10, 2, 2.0, 1).unwrap();
        let empty = ExemplarMemory::new(m, 2, 3);
        let mem = incremental::update_memory(&empty, &prior, m, seed).unwrap();
        prop_assert_eq!(mem.len(), m.min(prior.len()));
        let counts = mem.samples().class_counts();
        let hi = *counts.iter().max().unwrap();
        let lo = *counts.iter().min().unwrap();
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn forgetting_is_best_earlier_minus_last(accs in vec(0.0f64..100.0, 2..8)) {
        let history: Vec<Vec<Option<f64>>> = accs.iter().map(|&a| vec![Some(a)]).collect();
        let f = metrics::forgetting(&history, 0).unwrap();
        let best = accs[..accs.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(f, best - accs[accs.len() - 1]);
        prop_assert_eq!(metrics::forgetting(&history[..1], 0), None);
    }
}
