use bisimlab::transport::{wasserstein1, DiscreteDistribution};
use ndarray::Array2;
use proptest::prelude::*;

fn distribution(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    // Some atoms are exactly zero to exercise the drop/reinsert path.
    prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.01f64..1.0], 1..=max_len).prop_filter_map(
        "needs positive mass",
        |w| {
            let total: f64 = w.iter().sum();
            (total > 0.0).then(|| w.iter().map(|x| x / total).collect())
        },
    )
}

fn instance(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Array2<f64>)> {
    (distribution(max_len), distribution(max_len)).prop_flat_map(|(a, b)| {
        let (m, n) = (a.len(), b.len());
        // Integer-valued costs make ties and degenerate pivots common.
        let costs = prop::collection::vec(prop_oneof![0u8..4, 0u8..20].prop_map(f64::from), m * n);
        (Just(a), Just(b), costs.prop_map(move |c| Array2::from_shape_vec((m, n), c).unwrap()))
    })
}

fn solve(a: &[f64], b: &[f64], cost: &Array2<f64>) -> f64 {
    let mu = DiscreteDistribution::new(a.to_vec()).unwrap();
    let nu = DiscreteDistribution::new(b.to_vec()).unwrap();
    wasserstein1(&mu, &nu, cost.view()).unwrap().value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn plan_invariants((a, b, cost) in instance(7)) {
        let mu = DiscreteDistribution::new(a.clone()).unwrap();
        let nu = DiscreteDistribution::new(b.clone()).unwrap();
        let plan = wasserstein1(&mu, &nu, cost.view()).unwrap();
        prop_assert!(plan.coupling.iter().all(|&p| p >= 0.0));
        for (i, &w) in a.iter().enumerate() {
            prop_assert!((plan.coupling.row(i).sum() - w).abs() <= 1e-9);
        }
        for (j, &w) in b.iter().enumerate() {
            prop_assert!((plan.coupling.column(j).sum() - w).abs() <= 1e-9);
        }
        let direct: f64 = plan.coupling.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();
        prop_assert!((plan.value - direct).abs() <= 1e-9);
        // Strong duality certifies optimality.
        prop_assert!(plan.dual_infeasibility(cost.view()) <= 1e-9);
        prop_assert!((plan.dual_value(&mu, &nu) - plan.value).abs() <= 1e-9);
    }

    #[test]
    fn matches_vertex_enumeration((a, b, cost) in instance(4)) {
        let rows: Vec<Vec<f64>> = cost.rows().into_iter().map(|r| r.to_vec()).collect();
        let oracle = bisimlab_oracles::transport_vertex_min(&a, &b, &rows);
        prop_assert!((solve(&a, &b, &cost) - oracle).abs() <= 1e-9);
    }

    #[test]
    fn transposed_problem_has_same_value((a, b, cost) in instance(6)) {
        let forward = solve(&a, &b, &cost);
        let backward = solve(&b, &a, &cost.t().to_owned());
        prop_assert!((forward - backward).abs() <= 1e-12);
    }

    #[test]
    fn monotone_in_cost((a, b, cost) in instance(6), bump in prop::collection::vec(0.0f64..2.0, 36)) {
        let mut larger = cost.clone();
        for (k, c) in larger.iter_mut().enumerate() {
            *c += bump[k % bump.len()];
        }
        prop_assert!(solve(&a, &b, &cost) <= solve(&a, &b, &larger) + 1e-12);
    }

    #[test]
    fn scale_equivariant((a, b, cost) in instance(6), k in 0.0f64..10.0) {
        let base = solve(&a, &b, &cost);
        let scaled = solve(&a, &b, &(&cost * k));
        prop_assert!((scaled - k * base).abs() <= 1e-12 * (1.0 + k * base));
    }
}
