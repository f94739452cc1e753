mod common;

use bisimlab::analysis::toy_example_mdp;
use bisimlab::metric::*;
use bisimlab::suite::{random_suite, random_symmetric_table};
use bisimlab::{PolicyTable, TabularMdp};
use common::{plain, self_loops, sup_diff};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn suite() -> Vec<(TabularMdp, PolicyTable)> {
    random_suite(2024, 100)
}

#[test]
fn composed_operators_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (mdp, pi) in suite() {
        let bound = mdp.metric_upper_bound().max(1.0);
        for op in [Operator::RevisedGU, Operator::RevisedUG, Operator::Mico, Operator::Classic] {
            let n = op.input_size(&mdp);
            let a = random_symmetric_table(&mut rng, n, bound);
            let b = random_symmetric_table(&mut rng, n, bound);
            let ratio = contraction_ratio(op, &mdp, &pi, a.view(), b.view()).unwrap();
            assert!(ratio <= mdp.gamma() + 1e-12, "{op:?}: {ratio} > {}", mdp.gamma());
        }
        for c in [0.1, 0.5, 0.9] {
            for op in [Operator::Weighted { c }, Operator::WeightedGU { c }] {
                let n = op.input_size(&mdp);
                let a = random_symmetric_table(&mut rng, n, bound);
                let b = random_symmetric_table(&mut rng, n, bound);
                let ratio = contraction_ratio(op, &mdp, &pi, a.view(), b.view()).unwrap();
                assert!(ratio <= c + 1e-12, "{op:?}: {ratio}");
            }
        }
    }
}

#[test]
fn operators_preserve_symmetry_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (mdp, pi) in suite().into_iter().take(30) {
        let u = StateMetric::new(random_symmetric_table(&mut rng, mdp.n_states(), 3.0)).unwrap();
        let g = PairMetric::new(random_symmetric_table(&mut rng, mdp.n_pairs(), 3.0)).unwrap();
        assert_eq!(apply_classic_operator(&mdp, &pi, &u).unwrap().max_asymmetry(), 0.0);
        assert_eq!(apply_mico_operator(&mdp, &pi, &u).unwrap().max_asymmetry(), 0.0);
        assert_eq!(apply_revised_u(&mdp, &pi, &g).unwrap().max_asymmetry(), 0.0);
        assert_eq!(apply_revised_g(&mdp, &pi, &u).unwrap().max_asymmetry(), 0.0);
        assert_eq!(apply_weighted_g(&mdp, &pi, &u, 0.4).unwrap().max_asymmetry(), 0.0);
    }
}

#[test]
fn fixed_point_is_unique_and_decays_geometrically() {
    let opts = SolveOptions::default();
    for (mdp, pi) in suite() {
        let top = mdp.metric_upper_bound();
        for kind in [SolverKind::Revised, SolverKind::Mico, SolverKind::Classic] {
            let low = solve_fixed_point(kind, &mdp, &pi, Init::Zero, &opts).unwrap();
            let high = solve_fixed_point(kind, &mdp, &pi, Init::Constant(top), &opts).unwrap();
            assert!(low.trace.converged && high.trace.converged);
            assert!(low.u.sup_distance(&high.u) <= 10.0 * opts.tol);
            if let (Some(a), Some(b)) = (&low.g, &high.g) {
                assert!(a.sup_distance(b) <= 10.0 * opts.tol);
            }
            let rho = mdp.gamma();
            assert!(low.trace.max_rate_excess(rho) <= 1e-12, "{kind:?}");
            assert!(high.trace.max_rate_excess(rho) <= 1e-12, "{kind:?}");
            // Bounded by the constant-function bound.
            assert!(low.u.max_entry() <= top + 1e-9);
        }
    }
}

#[test]
fn revised_and_mico_match_dense_oracle() {
    let opts = SolveOptions::with_tol(1e-11);
    for (mdp, pi) in suite() {
        let pl = plain(&mdp, &pi);
        let (u, g) = bisimlab_oracles::revised_fixed_point(&pl.transition, &pl.reward, &pl.policy, pl.gamma, None);
        let sol = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Zero, &opts).unwrap();
        assert!(sup_diff(sol.u.values(), &u) <= 1e-8);
        assert!(sup_diff(sol.g.unwrap().values(), &g) <= 1e-8);

        let m = bisimlab_oracles::mico_fixed_point(&pl.transition, &pl.reward, &pl.policy, pl.gamma);
        let sol = solve_fixed_point(SolverKind::Mico, &mdp, &pi, Init::Zero, &opts).unwrap();
        assert!(sup_diff(sol.u.values(), &m) <= 1e-8);
    }
}

#[test]
fn weighted_matches_dense_oracle() {
    let opts = SolveOptions::with_tol(1e-11);
    for (mdp, pi) in suite().into_iter().take(20) {
        let c = mdp.gamma() / (1.0 + mdp.gamma());
        let pl = plain(&mdp, &pi);
        let (u, g) = bisimlab_oracles::revised_fixed_point(&pl.transition, &pl.reward, &pl.policy, pl.gamma, Some(c));
        let sol = solve_fixed_point(SolverKind::Weighted { c }, &mdp, &pi, Init::Zero, &opts).unwrap();
        assert!(sup_diff(sol.u.values(), &u) <= 1e-8);
        assert!(sup_diff(sol.g.unwrap().values(), &g) <= 1e-8);
    }
}

/// The weighted system at `c` is `(1 - c)` times the revised system with
/// discount `c`.
#[test]
fn weighted_is_rescaled_revised_at_discount_c() {
    let opts = SolveOptions::with_tol(1e-11);
    for (mdp, pi) in suite().into_iter().take(20) {
        let c = 0.37;
        let weighted = solve_fixed_point(SolverKind::Weighted { c }, &mdp, &pi, Init::Zero, &opts).unwrap();
        let revised = solve_fixed_point(SolverKind::Revised, &mdp.with_gamma(c), &pi, Init::Zero, &opts).unwrap();
        assert!(weighted.u.sup_distance(&revised.u.scaled(1.0 - c)) <= 1e-9);
    }
}

#[test]
fn deterministic_self_distance_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = SolveOptions::default();
    for (mdp, _) in suite().into_iter().take(40) {
        // Force deterministic dynamics and policy.
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut t = ndarray::Array3::zeros((ns, na, ns));
        for s in 0..ns {
            for a in 0..na {
                t[[s, a, rand::Rng::random_range(&mut rng, 0..ns)]] = 1.0;
            }
        }
        let det = TabularMdp::new(t, mdp.reward().clone(), mdp.gamma()).unwrap();
        let actions: Vec<usize> = (0..ns).map(|_| rand::Rng::random_range(&mut rng, 0..na)).collect();
        let pi = PolicyTable::deterministic(&actions, na);
        let sol = solve_fixed_point(SolverKind::Revised, &det, &pi, Init::Zero, &opts).unwrap();
        let g = sol.g.unwrap();
        for s in 0..ns {
            assert!(sol.u.get(s, s) <= opts.tol);
        }
        for x in 0..det.n_pairs() {
            assert!(g.get(x, x) <= opts.tol);
        }
    }
}

#[test]
fn classic_self_loop_closed_form() {
    for gamma in [0.1, 0.5, 0.9, 0.99] {
        let (mdp, pi) = self_loops(&[0.0, 1.0], gamma);
        let sol = solve_fixed_point(SolverKind::Classic, &mdp, &pi, Init::Zero, &SolveOptions::default()).unwrap();
        assert!((sol.u.get(0, 1) - 1.0 / (1.0 - gamma)).abs() <= 1e-9);
    }
}

#[test]
fn toy_classic_and_mico_vanish() {
    let (mdp, pi) = toy_example_mdp();
    let opts = SolveOptions::with_tol(1e-12);
    for kind in [SolverKind::Classic, SolverKind::Mico] {
        let sol = solve_fixed_point(kind, &mdp, &pi, Init::Zero, &opts).unwrap();
        assert!(sol.u.max_entry() <= 1e-12, "{kind:?}: {:?}", sol.u.values());
    }
}

/// At the joint fixed point the pair distance between (s1, a0) and (s2, a2)
/// is their reward gap plus the discounted distance of their successors
/// (s1, s3).
#[test]
fn toy_pair_distance_decomposes() {
    let (mdp, pi) = toy_example_mdp();
    let sol = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Zero, &SolveOptions::with_tol(1e-12)).unwrap();
    let g = sol.g.unwrap();
    let x = mdp.pair_index(0, 0);
    let y = mdp.pair_index(1, 2);
    let expected = 1.0 + 0.9 * sol.u.get(0, 2);
    assert!((g.get(x, y) - expected).abs() <= 1e-10);
}

#[test]
fn toy_weighted_reward_term() {
    let (mdp, pi) = toy_example_mdp();
    let g = apply_weighted_g(&mdp, &pi, &StateMetric::zeros(3), 0.5).unwrap();
    assert_eq!(g.get(mdp.pair_index(0, 0), mdp.pair_index(1, 2)), 0.5);
}

#[test]
fn revised_u_under_deterministic_policy_picks_the_played_pair() {
    let (mdp, _) = toy_example_mdp();
    let pi = PolicyTable::deterministic(&[1, 2, 0], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = PairMetric::new(random_symmetric_table(&mut rng, 9, 1.0)).unwrap();
    let u = apply_revised_u(&mdp, &pi, &g).unwrap();
    assert_eq!(u.get(0, 1), g.get(mdp.pair_index(0, 1), mdp.pair_index(1, 2)));
}
