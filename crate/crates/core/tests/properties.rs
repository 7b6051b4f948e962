use bdtree::density::log_tree_density;
use bdtree::factor::{log_marginal_likelihood, log_marginal_likelihood_closed_form, sample_data};
use bdtree::mcmc::stream_rng;
use bdtree::prior::simulate_tree;
use bdtree::{Hyperparams, Tree};
use proptest::prelude::*;

fn hyperparams() -> impl Strategy<Value = Hyperparams> {
    (
        0.2..2.0f64,
        0.2..1.5f64,
        0.2..3.0f64,
        0.2..3.0f64,
        0.3..2.0f64,
        0.3..2.0f64,
    )
        .prop_map(|(lambda_s, lambda_r, theta_s, theta_r, sigma_x, sigma_y)| Hyperparams {
            lambda_s,
            lambda_r,
            theta_s,
            theta_r,
            sigma_x,
            sigma_y,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulated_trees_are_valid_and_round_trip(seed in any::<u64>(), n in 1usize..10, hp in hyperparams()) {
        let tree = simulate_tree(n, &hp, &mut stream_rng(seed, 0)).unwrap();
        prop_assert!(tree.validate().is_empty());
        prop_assert_eq!(tree.feature_matrix().z.nrows(), n);

        let json = tree.to_json().unwrap();
        let back = Tree::from_json(&json).unwrap();
        prop_assert_eq!(json, back.to_json().unwrap());
        let (a, b) = (log_tree_density(&tree, &hp).unwrap(), log_tree_density(&back, &hp).unwrap());
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn restriction_keeps_a_valid_tree(seed in any::<u64>(), n in 2usize..10, hp in hyperparams(), keep in any::<u16>()) {
        let tree = simulate_tree(n, &hp, &mut stream_rng(seed, 0)).unwrap();
        let mut subset: Vec<usize> = (0..n).filter(|i| keep >> i & 1 == 1).collect();
        if subset.is_empty() {
            subset.push(0);
        }
        let sub = tree.restrict_to_objects(&subset).unwrap();
        prop_assert!(sub.validate().is_empty());
        prop_assert_eq!(sub.n_objects(), subset.len());
        prop_assert!(log_tree_density(&sub, &hp).unwrap().is_finite());
    }

    #[test]
    fn likelihood_forms_agree_on_complete_data(seed in any::<u64>(), n in 1usize..8, d in 1usize..4, hp in hyperparams()) {
        let mut rng = stream_rng(seed, 0);
        let tree = simulate_tree(n, &hp, &mut rng).unwrap();
        let (data, _) = sample_data(&tree, &hp, d, &mut rng).unwrap();
        let general = log_marginal_likelihood(&data, &tree, &hp).unwrap();
        let closed = log_marginal_likelihood_closed_form(&data.y, &tree, &hp).unwrap();
        prop_assert!((general - closed).abs() <= 1e-8 * (1.0 + general.abs()), "{general} vs {closed}");
    }
}
