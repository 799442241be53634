use proptest::prelude::*;

use koala::autodiff::{kl_loss, softmax_t, AdamConfig, AdamState, Tensor};
use koala::data::{dirichlet_split, make_splits, SplitFractions};
use koala::distillation::{consensus_soft_labels, integrate_refined, refine_distribution, refine_rows};
use koala::federation::{aggregate_homo, sample_clients};
use koala::models::{count_params, init_model, Model, ModelSpec};

fn logit_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..12).prop_filter("not constant", |z| {
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max - min > 1e-6
    })
}

fn logit_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(z in logit_matrix(3, 5), t in 0.5f64..10.0, shift in -30.0f64..30.0) {
        let p = softmax_t(&z, t).unwrap();
        for row in p.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = softmax_t(&z.map(|v| v + shift), t).unwrap();
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(a in logit_matrix(2, 4), b in logit_matrix(2, 4)) {
        let p = softmax_t(&a, 1.0).unwrap();
        let q = softmax_t(&b, 1.0).unwrap();
        prop_assert!(kl_loss(&p, &q).unwrap() >= -1e-15);
        prop_assert!(kl_loss(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn refinement_mean_min_and_order(z in logit_vec(), a in 0.5f64..5.0) {
        let r = refine_distribution(&z, a).unwrap();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        prop_assert!((mean - a).abs() < 1e-9);
        prop_assert!(r.iter().copied().fold(f64::INFINITY, f64::min).abs() < 1e-12);
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] < z[j] {
                    prop_assert!(r[i] <= r[j]);
                }
            }
        }
    }

    #[test]
    fn refinement_affine_invariance(z in logit_vec(), scale in 0.1f64..10.0, shift in -10.0f64..10.0) {
        let r = refine_distribution(&z, 2.0).unwrap();
        let moved: Vec<f64> = z.iter().map(|v| scale * v + shift).collect();
        let r2 = refine_distribution(&moved, 2.0).unwrap();
        for (x, y) in r.iter().zip(&r2) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn integration_ignores_client_order(
        z in prop::collection::vec(logit_matrix(4, 3), 1..5),
        counts in prop::collection::vec(1u64..1000, 5),
    ) {
        let refined: Vec<Tensor<f64>> = z.iter().map(|t| refine_rows(t, 2.0).unwrap().0).collect();
        let counts = &counts[..refined.len()];
        let refs: Vec<&Tensor<f64>> = refined.iter().collect();
        let forward = integrate_refined(&refs, counts).unwrap();
        let rev_refs: Vec<&Tensor<f64>> = refined.iter().rev().collect();
        let rev_counts: Vec<u64> = counts.iter().rev().copied().collect();
        let backward = integrate_refined(&rev_refs, &rev_counts).unwrap();
        for (a, b) in forward.data().iter().zip(backward.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // weights sum to one, so every row keeps mean A
        for row in forward.row_iter() {
            prop_assert!((row.iter().sum::<f64>() / 3.0 - 2.0).abs() < 1e-9);
        }
        let soft = consensus_soft_labels(&forward, 7.0).unwrap();
        for row in soft.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_is_convex(seeds in prop::collection::vec(any::<u64>(), 1..5), counts in prop::collection::vec(1u64..100, 5)) {
        let spec = ModelSpec::mlp(4, &[3], 2).unwrap();
        let models: Vec<Model<f64>> = seeds.iter().map(|&s| init_model(&spec, s).unwrap()).collect();
        let refs: Vec<&Model<f64>> = models.iter().collect();
        let agg = aggregate_homo(&refs, &counts[..models.len()]).unwrap();
        let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flat_params()).collect();
        for (k, v) in agg.flat_params().iter().enumerate() {
            let lo = flats.iter().map(|f| f[k]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-15 && *v <= hi + 1e-15);
        }
    }

    #[test]
    fn dirichlet_shards_cover_pool(
        labels in prop::collection::vec(0usize..4, 20..200),
        clients in 1usize..6,
        alpha in 0.05f64..100.0,
        seed in any::<u64>(),
    ) {
        let shards = dirichlet_split(&labels, 4, clients, alpha, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        prop_assert!(shards.iter().all(|s| !s.is_empty()));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn splits_are_disjoint(n in 50usize..2000, seed in any::<u64>()) {
        let plan = make_splits(n, &SplitFractions::default(), seed).unwrap();
        plan.validate(n).unwrap();
        let total = plan.test.len() + plan.proxy.len() + plan.pretrain.len() + plan.pool().len();
        prop_assert_eq!(total, n);
    }

    #[test]
    fn forward_is_batch_permutation_equivariant(seed in any::<u64>(), x in logit_matrix(5, 4)) {
        let spec = ModelSpec::mlp(4, &[6, 5], 3).unwrap();
        let m: Model<f64> = init_model(&spec, seed).unwrap();
        let order = [3, 0, 4, 1, 2];
        let out = m.forward(&x).unwrap();
        let permuted = m.forward(&x.select_rows(&order)).unwrap();
        prop_assert_eq!(permuted, out.select_rows(&order));
        let (hidden, logits) = m.forward_with_hidden(&x).unwrap();
        prop_assert_eq!(&logits, &out);
        prop_assert_eq!(m.forward_from(spec.hidden_tap + 1, &hidden).unwrap(), out);
    }

    #[test]
    fn param_count_matches_layer_sum(hidden in prop::collection::vec(1usize..40, 1..4), input in 1usize..30, classes in 2usize..10) {
        let spec = ModelSpec::mlp(input, &hidden, classes).unwrap();
        let m: Model<f64> = init_model(&spec, 0).unwrap();
        let expected: u64 = spec.layers.iter().map(|l| (l.in_dim * l.out_dim + l.out_dim) as u64).sum();
        prop_assert_eq!(count_params(&m).total, expected);
    }

    #[test]
    fn adam_zero_gradient_is_identity(values in prop::collection::vec(-5.0f64..5.0, 1..10), steps in 1usize..5) {
        let mut p = Tensor::vector(values.clone());
        let g = Tensor::zeros(p.shape());
        let mut opt = AdamState::new(AdamConfig::new(1e-2, 0.0));
        for _ in 0..steps {
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        prop_assert_eq!(p.data(), &values[..]);
    }

    #[test]
    fn sampling_is_sorted_distinct_subset(n in 1usize..40, fraction in 0.01f64..1.0, seed in any::<u64>(), round in 0usize..100) {
        let s = sample_clients(n, fraction, seed, round).unwrap();
        prop_assert_eq!(s.len(), ((fraction * n as f64).ceil() as usize).clamp(1, n));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < n));
        prop_assert_eq!(&s, &sample_clients(n, fraction, seed, round).unwrap());
    }
}
