//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! straight to stdout (bypassing the harness capture) before asserting.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bisimlab::analysis::{
    check_q_bound, check_toy_closed_forms, check_value_bound, off_diagonal, reward_gap_comparison, spearman,
    toy_example_mdp, verify_toy_closed_forms,
};
use bisimlab::mdp::{marginal_transitions, sample_transition, Transition};
use bisimlab::metric::{contraction_ratio, solve_fixed_point, Init, Operator, SolveOptions, SolverKind};
use bisimlab::representation::*;
use bisimlab::suite::{random_suite, random_symmetric_table};
use bisimlab::transport::{wasserstein1, DiscreteDistribution};
use bisimlab::{PolicyTable, StateMetric, TabularMdp};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUITE_SEED: u64 = 2024;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} {name}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

fn suite() -> Vec<(TabularMdp, PolicyTable)> {
    random_suite(SUITE_SEED, 100)
}

#[test]
fn criterion_01_toy_example_exactness() {
    let start = Instant::now();
    let mut worst_revised: f64 = 0.0;
    let mut worst_classic: f64 = 0.0;
    for gamma in [0.1, 0.5, 0.9, 0.99] {
        let r = verify_toy_closed_forms(gamma).unwrap();
        for c in &r.checks {
            if c.quantity.starts_with("revised") {
                worst_revised = worst_revised.max(c.abs_error);
            } else {
                worst_classic = worst_classic.max(c.abs_error);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_revised <= 1e-8 && worst_classic <= 1e-8 && elapsed < Duration::from_secs(1);

    // Informational: the same MDP with every reward halved.
    let (mdp, pi) = toy_example_mdp();
    let halved = TabularMdp::new(mdp.transition().clone(), mdp.reward() * 0.5, 0.9).unwrap();
    let mut halved_worst: f64 = 0.0;
    for gamma in [0.1, 0.5, 0.9, 0.99] {
        let r = check_toy_closed_forms(&halved.with_gamma(gamma), &pi).unwrap();
        halved_worst = r.checks.iter().fold(halved_worst, |m, c| m.max(c.abs_error));
    }
    report(
        1,
        "toy example exactness",
        pass,
        &format!(
            "max error revised {worst_revised:.3e}, classic {worst_classic:.3e}, {elapsed:.2?}; \
             with halved rewards every closed form matches to {halved_worst:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_contraction_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = f64::NEG_INFINITY;
    for (mdp, pi) in suite() {
        let scale = mdp.metric_upper_bound().max(1.0);
        let gamma = mdp.gamma();
        let mut ops: Vec<(Operator, f64)> = vec![(Operator::RevisedGU, gamma), (Operator::RevisedUG, gamma)];
        for c in [0.1, 0.5, 0.9] {
            ops.push((Operator::Weighted { c }, c));
            ops.push((Operator::WeightedGU { c }, c));
        }
        for (op, bound) in ops {
            for _ in 0..3 {
                let n = op.input_size(&mdp);
                let a = random_symmetric_table(&mut rng, n, scale);
                let b = random_symmetric_table(&mut rng, n, scale);
                let ratio = contraction_ratio(op, &mdp, &pi, a.view(), b.view()).unwrap();
                worst = worst.max(ratio - bound);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(30);
    report(2, "contraction suite", pass, &format!("max ratio minus modulus {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_03_uniqueness_and_convergence() {
    let opts = SolveOptions::default();
    let (mut worst_gap, mut worst_rate): (f64, f64) = (0.0, f64::NEG_INFINITY);
    let mut all_converged = true;
    for (mdp, pi) in suite() {
        let low = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Zero, &opts).unwrap();
        let high = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Constant(mdp.metric_upper_bound()), &opts).unwrap();
        all_converged &= low.trace.converged && high.trace.converged;
        let gap = low.u.sup_distance(&high.u).max(low.g.as_ref().unwrap().sup_distance(high.g.as_ref().unwrap()));
        worst_gap = worst_gap.max(gap);
        for sol in [&low, &high] {
            worst_rate = worst_rate.max(sol.trace.max_rate_excess(mdp.gamma()));
        }
    }
    let pass = all_converged && worst_gap <= 10.0 * opts.tol && worst_rate <= 1e-12;
    report(
        3,
        "uniqueness and convergence",
        pass,
        &format!("max init gap {worst_gap:.3e} (limit {:.0e}), max rate excess {worst_rate:.3e}", 10.0 * opts.tol),
    );
    assert!(pass);
}

#[test]
fn criterion_04_value_and_q_bounds() {
    let opts = SolveOptions::default();
    let mut all = true;
    let mut worst: f64 = f64::NEG_INFINITY;
    for (mdp, pi) in suite() {
        let sol = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Zero, &opts).unwrap();
        let v = check_value_bound(&mdp, &pi, &sol.u, opts.tol).unwrap();
        let q = check_q_bound(&mdp, &pi, sol.g.as_ref().unwrap(), opts.tol).unwrap();
        all &= v.satisfied && q.satisfied;
        worst = worst.max(v.max_violation).max(q.max_violation);
    }
    // Two absorbing states with rewards 0 and 1: |V1 - V2| = U12 = 1 / (1 - gamma).
    let mut t = ndarray::Array3::zeros((2, 1, 2));
    t[[0, 0, 0]] = 1.0;
    t[[1, 0, 1]] = 1.0;
    let loops = TabularMdp::new(t, ndarray::array![[0.0], [1.0]], 0.9).unwrap();
    let loop_pi = PolicyTable::uniform(2, 1);
    let sol = solve_fixed_point(SolverKind::Revised, &loops, &loop_pi, Init::Zero, &opts).unwrap();
    let tight = check_value_bound(&loops, &loop_pi, &sol.u, opts.tol).unwrap();
    let pass = all && worst <= 10.0 * opts.tol && tight.satisfied && tight.max_violation.abs() <= 10.0 * opts.tol;
    report(
        4,
        "value and Q bounds",
        pass,
        &format!("max violation {worst:.3e}; self-loop tightness gap {:.3e}", tight.max_violation),
    );
    assert!(pass);
}

#[test]
fn criterion_05_reward_gap_inequality() {
    let worst = suite()
        .iter()
        .map(|(mdp, pi)| reward_gap_comparison(mdp, pi).max_excess())
        .fold(f64::NEG_INFINITY, f64::max);
    let (mdp, pi) = toy_example_mdp();
    let toy = reward_gap_comparison(&mdp, &pi);
    let (d1, d2) = (toy.delta1[[0, 1]], toy.delta2[[0, 1]]);
    let pass = worst <= 1e-12 && d2 == 0.0 && (d1 - 0.5).abs() <= 1e-12;
    report(5, "reward-gap inequality", pass, &format!("max delta2 - delta1 {worst:.3e}; toy (s1,s2) delta1 {d1}, delta2 {d2}"));
    assert!(pass);
}

#[test]
fn criterion_06_weighted_scaling_identity() {
    let opts = SolveOptions::default();
    let mut worst: f64 = 0.0;
    let mut rescaled: f64 = 0.0;
    for (mdp, pi) in suite().into_iter().take(5) {
        let gamma = mdp.gamma();
        let c = gamma / (1.0 + gamma);
        let weighted = solve_fixed_point(SolverKind::Weighted { c }, &mdp, &pi, Init::Zero, &opts).unwrap();
        let revised = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Zero, &opts).unwrap();
        let scale = 1.0 / (1.0 + gamma);
        worst = worst
            .max(weighted.u.sup_distance(&revised.u.scaled(scale)))
            .max(weighted.g.as_ref().unwrap().sup_distance(&revised.g.as_ref().unwrap().scaled(scale)));
        // Informational: the weighted system is (1 - c) times the revised one at discount c.
        let at_c = solve_fixed_point(SolverKind::Revised, &mdp.with_gamma(c), &pi, Init::Zero, &opts).unwrap();
        rescaled = rescaled.max(weighted.u.sup_distance(&at_c.u.scaled(1.0 - c)));
    }
    let pass = worst <= 10.0 * opts.tol;
    report(
        6,
        "weighted scaling identity",
        pass,
        &format!("max |G_c - G/(1+gamma)| {worst:.3e}; weighted vs (1-c) x revised at discount c: {rescaled:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_transport_exactness() {
    let opts = SolveOptions::default();
    let (mut worst, mut count): (f64, usize) = (0.0, 0);
    for (mdp, pi) in suite() {
        let u = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Zero, &opts).unwrap().u;
        let mut rows: Vec<Vec<f64>> = marginal_transitions(&mdp, &pi).rows().into_iter().map(|r| r.to_vec()).collect();
        rows.extend(mdp.pair_transition_matrix().rows().into_iter().map(|r| r.to_vec()));
        let support = |r: &[f64]| -> Vec<usize> { (0..r.len()).filter(|&k| r[k] > 0.0).collect() };
        for a in &rows {
            for b in &rows {
                let (sa, sb) = (support(a), support(b));
                if sa.len() > 4 || sb.len() > 4 {
                    continue;
                }
                let mu = DiscreteDistribution::new(a.clone()).unwrap();
                let nu = DiscreteDistribution::new(b.clone()).unwrap();
                let value = wasserstein1(&mu, &nu, u.values().view()).unwrap().value;
                let cost: Vec<Vec<f64>> = sa.iter().map(|&i| sb.iter().map(|&j| u.get(i, j)).collect()).collect();
                let wa: Vec<f64> = sa.iter().map(|&i| a[i]).collect();
                let wb: Vec<f64> = sb.iter().map(|&j| b[j]).collect();
                let oracle = bisimlab_oracles::transport_vertex_min(&wa, &wb, &cost);
                worst = worst.max((value - oracle).abs());
                count += 1;
            }
        }
    }
    let pass = count > 0 && worst <= 1e-9;
    report(7, "transport exactness", pass, &format!("{count} problems, max |simplex - vertex oracle| {worst:.3e}"));
    assert!(pass);
}

fn gradient_setup(seed: u64, normalize: bool) -> (EmbeddingModel, Vec<Transition>) {
    let (mdp, pi) = bisimlab::suite::suite_instance(seed, 0, &bisimlab::suite::SuiteSpec::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..6);
    let m = EmbeddingModel::init(&mut rng, mdp.n_states(), mdp.n_actions(), d, normalize).unwrap();
    let k = if normalize { 1.0 } else { 10.0 };
    let bias = Array1::from_shape_simple_fn(d, || rng.random_range(-0.5..0.5));
    let raw = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let m = EmbeddingModel::from_parts(m.phi() * k, m.psi_weights() * k, bias, raw, normalize).unwrap();
    let batch = (0..rng.random_range(2..9))
        .map(|_| {
            let s = rng.random_range(0..mdp.n_states());
            sample_transition(&mdp, &pi, &mut rng, s).unwrap()
        })
        .collect();
    (m, batch)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[test]
fn criterion_08_gradient_correctness() {
    const H: f64 = 1e-5;
    let (mut enc_worst, mut c_worst): (f64, f64) = (0.0, 0.0);
    let mut ledger = true;
    for seed in 0..20 {
        for distance in [DistanceKind::Mico, DistanceKind::Simsr] {
            for loss in [LossKind::Squared, LossKind::Huber] {
                let obj = Objective { distance, beta: 0.1, loss };
                let (mut model, batch) = gradient_setup(seed, distance == DistanceKind::Simsr);
                let target = frozen_target(&model, &batch, &obj).unwrap();
                let (_, grads) = encoder_loss_with_target(&model, &batch, &target, &obj).unwrap();
                let at = |phi: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| {
                    let m = EmbeddingModel::from_parts(phi.clone(), w.clone(), b.clone(), model.raw_c(), model.normalize_outputs()).unwrap();
                    encoder_loss_with_target(&m, &batch, &target, &obj).unwrap().0
                };
                let (phi, w, b) = (model.phi().clone(), model.psi_weights().clone(), model.psi_bias().clone());
                for (idx, &g) in grads.phi.indexed_iter() {
                    let (mut up, mut down) = (phi.clone(), phi.clone());
                    up[idx] += H;
                    down[idx] -= H;
                    enc_worst = enc_worst.max(rel_err(g, (at(&up, &w, &b) - at(&down, &w, &b)) / (2.0 * H)));
                }
                for (idx, &g) in grads.psi_weights.indexed_iter() {
                    let (mut up, mut down) = (w.clone(), w.clone());
                    up[idx] += H;
                    down[idx] -= H;
                    enc_worst = enc_worst.max(rel_err(g, (at(&phi, &up, &b) - at(&phi, &down, &b)) / (2.0 * H)));
                }
                for (idx, &g) in grads.psi_bias.indexed_iter() {
                    let (mut up, mut down) = (b.clone(), b.clone());
                    up[idx] += H;
                    down[idx] -= H;
                    enc_worst = enc_worst.max(rel_err(g, (at(&phi, &w, &up) - at(&phi, &w, &down)) / (2.0 * H)));
                }

                let (_, cg) = c_loss_and_grad(&model, &batch, &obj).unwrap();
                let raw = model.raw_c();
                for k in 0..2 {
                    let (mut up, mut down) = (raw, raw);
                    up[k] += H;
                    down[k] -= H;
                    model.set_raw_c(up);
                    let lu = c_loss_and_grad(&model, &batch, &obj).unwrap().0;
                    model.set_raw_c(down);
                    let ld = c_loss_and_grad(&model, &batch, &obj).unwrap().0;
                    c_worst = c_worst.max(rel_err(cg.raw_c[k], (lu - ld) / (2.0 * H)));
                }
                model.set_raw_c(raw);

                // Stop-gradient ledger: the logits cannot reach the encoder
                // gradients, and the coefficient gradient treats the encoder
                // outputs as constants.
                model.set_raw_c([raw[0] + 2.0, raw[1] - 3.0]);
                let moved = encoder_loss_with_target(&model, &batch, &target, &obj).unwrap().1;
                ledger &= moved == grads;
                let pieces = pairwise_targets(&model, &batch, &obj).unwrap();
                let pred = pairwise_predictions(&model, &batch, &obj).unwrap();
                ledger &= c_loss_and_grad(&model, &batch, &obj).unwrap() == c_loss_with(model.raw_c(), &pieces, &pred, loss);
            }
        }
    }
    let pass = enc_worst <= 1e-4 && c_worst <= 1e-6 && ledger;
    report(
        8,
        "gradient correctness",
        pass,
        &format!("max relative error phi/psi {enc_worst:.3e}, raw_c {c_worst:.3e}; stop-gradient ledger {}", if ledger { "holds" } else { "broken" }),
    );
    assert!(pass);
}

struct ToyRun {
    trace: TrainTrace,
    exact: StateMetric,
    elapsed: Duration,
}

/// The default SimSR run on the toy MDP, shared by criteria 9 and 10.
fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (mdp, pi) = toy_example_mdp();
        let start = Instant::now();
        let config = TrainConfig { distance: DistanceKind::Simsr, steps: 20_000, seed: 0, ..TrainConfig::default() };
        let mut model = bisimlab_cli::commands::initial_model(&mdp, &config).unwrap();
        let trace = train(&mut model, &mdp, &pi, &config).unwrap();
        let elapsed = start.elapsed();
        let exact = solve_fixed_point(SolverKind::Revised, &mdp, &pi, Init::Zero, &SolveOptions::default()).unwrap().u;
        ToyRun { trace, exact, elapsed }
    })
}

#[test]
fn criterion_09_representation_fidelity() {
    let run = toy_run();
    let rho = spearman(&off_diagonal(run.trace.final_distance_table.values()), &off_diagonal(run.exact.values()));
    let losses = &run.trace.encoder_losses;
    let ratio = losses[19_999] / losses[99];
    let pass = rho >= 0.9 && ratio <= 0.1 && run.elapsed < Duration::from_secs(120);
    report(
        9,
        "representation fidelity",
        pass,
        &format!("spearman {rho:.4} (need 0.9), loss(20k)/loss(100) {ratio:.3e}, {:.2?}", run.elapsed),
    );
    assert!(pass);
}

#[test]
fn criterion_10_coefficient_dynamics() {
    let run = toy_run();
    let m = monitor_c(&run.trace, 1e-3, 20).unwrap();
    let in_range = run.trace.c_values.iter().all(|&c| c > 0.0 && c < 1.0);
    let pass = m.satisfied && in_range;
    report(
        10,
        "coefficient dynamics",
        pass,
        &format!("max tail delta {:.3e} over 20 records, final c {:.6}, c in (0,1): {in_range}", m.max_tail_delta, m.final_c),
    );
    assert!(pass);
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_11_determinism() {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.json");
    let toy = toy.to_str().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["solve", "--mdp", toy, "--operator", "revised"],
        vec!["solve", "--mdp", toy, "--operator", "weighted", "--c", "0.4"],
        vec!["verify", "--seed", "3"],
        vec!["verify", "--toy", "--gamma", "0.5"],
        vec!["compare", "--mdp", toy],
        vec!["train", "--mdp", toy, "--distance", "simsr", "--steps", "20000", "--seed", "7"],
        vec!["train", "--mdp", toy, "--distance", "mico", "--beta", "0.1", "--steps", "2000", "--seed", "7"],
    ];
    let mut failures = Vec::new();
    for args in &commands {
        let mut outputs = Vec::new();
        for threads in ["1", "4"] {
            let dir = tempfile::tempdir().unwrap();
            let out = Command::new(env!("CARGO_BIN_EXE_bisimlab"))
                .args(args)
                .args(["--out", dir.path().to_str().unwrap()])
                .env("BISIMLAB_THREADS", threads)
                .output()
                .unwrap();
            outputs.push((out.status.code(), out.stdout, dir_contents(dir.path())));
        }
        if outputs[0] != outputs[1] || outputs[0].2.is_empty() {
            failures.push(args[0..2].join(" "));
        }
    }
    let pass = failures.is_empty();
    report(
        11,
        "determinism",
        pass,
        &format!("{} commands run twice; differing: {}", commands.len(), if pass { "none".into() } else { failures.join(", ") }),
    );
    assert!(pass);
}
