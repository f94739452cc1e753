use std::path::{Path, PathBuf};

use bisimlab::analysis::{
    check_q_bound, check_toy_closed_forms, check_value_bound, reward_gap_comparison, verify_toy_closed_forms, AnalysisError,
    ClosedFormReport,
};
use bisimlab::mdp::marginal_transitions;
use bisimlab::metric::{
    contraction_ratio, solve_fixed_point, Init, MetricError, Operator, Solution, SolveOptions, SolverKind,
};
use bisimlab::representation::{monitor_c, train, DistanceKind, EmbeddingModel, LossKind, ReprError, TrainConfig};
use bisimlab::suite::{random_symmetric_table, suite_instance, SuiteSpec};
use bisimlab::transport::{wasserstein1, DiscreteDistribution, TransportError};
use bisimlab::{PolicyTable, TabularMdp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::io::{self, IoError};
use crate::{
    Command, CompareArgs, Common, DistanceArg, Fault, LossArg, OperatorArg, SolveArgs, TrainArgs, VerifyArgs, EXIT_FAILURE,
    EXIT_NONCONVERGED, EXIT_OK,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{0}")]
    Usage(String),
}

pub fn run(command: &Command) -> Result<i32, CliError> {
    match command {
        Command::Solve(args) => solve(args),
        Command::Verify(args) => verify(args),
        Command::Train(args) => train_cmd(args),
        Command::Compare(args) => compare(args),
    }
}

fn require_mdp(common: &Common) -> Result<&Path, CliError> {
    common
        .mdp
        .as_deref()
        .ok_or_else(|| CliError::Usage("--mdp is required for this command".into()))
}

/// Loads the MDP and applies the `--gamma` override, revalidating after it.
fn load(common: &Common, path: &Path) -> Result<(TabularMdp, PolicyTable), CliError> {
    let (mut mdp, policy) = io::load_mdp(path)?;
    if let Some(gamma) = common.gamma {
        mdp = mdp.with_gamma(gamma);
        io::check_valid(&mdp, &policy, path)?;
    }
    Ok((mdp, policy))
}

fn out_dir(common: &Common) -> Result<PathBuf, CliError> {
    io::create_dir(&common.out)?;
    Ok(common.out.clone())
}

fn options(common: &Common) -> SolveOptions {
    SolveOptions {
        tol: common.tol,
        max_iters: common.max_iters,
        ..SolveOptions::default()
    }
}

fn solver_kind(op: OperatorArg, c: f64) -> SolverKind {
    match op {
        OperatorArg::Classic => SolverKind::Classic,
        OperatorArg::Mico => SolverKind::Mico,
        OperatorArg::Revised => SolverKind::Revised,
        OperatorArg::Weighted => SolverKind::Weighted { c },
    }
}

fn pair_names(mdp: &TabularMdp) -> Vec<String> {
    (0..mdp.n_pairs()).map(|x| mdp.pair_name(x)).collect()
}

#[derive(Serialize)]
struct SolveSummary {
    operator: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
    gamma: f64,
    tol: f64,
    iterations: usize,
    final_residual: f64,
    converged: bool,
}

fn summary(kind: SolverKind, mdp: &TabularMdp, tol: f64, sol: &Solution) -> SolveSummary {
    SolveSummary {
        operator: kind.name(),
        c: match kind {
            SolverKind::Weighted { c } => Some(c),
            _ => None,
        },
        gamma: mdp.gamma(),
        tol,
        iterations: sol.trace.iterations,
        final_residual: sol.trace.final_residual,
        converged: sol.trace.converged,
    }
}

fn write_solution(dir: &Path, prefix: &str, mdp: &TabularMdp, sol: &Solution) -> Result<(), CliError> {
    io::write_matrix_csv(&dir.join(format!("{prefix}u.csv")), mdp.state_names(), sol.u.values())?;
    if let Some(g) = &sol.g {
        io::write_matrix_csv(&dir.join(format!("{prefix}g.csv")), &pair_names(mdp), g.values())?;
    }
    io::write_solve_trace_csv(&dir.join(format!("{prefix}trace.csv")), &sol.trace)?;
    Ok(())
}

fn report_nonconvergence(name: &str, sol: &Solution) {
    eprintln!(
        "{name}: not converged after {} sweeps, residual {:e}",
        sol.trace.iterations, sol.trace.final_residual
    );
}

fn solve(args: &SolveArgs) -> Result<i32, CliError> {
    let path = require_mdp(&args.common)?;
    let (mdp, policy) = load(&args.common, path)?;
    let dir = out_dir(&args.common)?;
    let kind = solver_kind(args.operator, args.c);
    let sol = solve_fixed_point(kind, &mdp, &policy, Init::Zero, &options(&args.common))?;
    write_solution(&dir, "", &mdp, &sol)?;
    io::write_json(&dir.join("summary.json"), &summary(kind, &mdp, args.common.tol, &sol))?;
    if sol.trace.converged {
        println!(
            "{}: converged in {} sweeps, residual {:e}",
            kind.name(),
            sol.trace.iterations,
            sol.trace.final_residual
        );
        Ok(EXIT_OK)
    } else {
        report_nonconvergence(kind.name(), &sol);
        Ok(EXIT_NONCONVERGED)
    }
}

fn compare(args: &CompareArgs) -> Result<i32, CliError> {
    let path = require_mdp(&args.common)?;
    let (mdp, policy) = load(&args.common, path)?;
    let dir = out_dir(&args.common)?;
    let ops = if args.operator.is_empty() {
        vec![OperatorArg::Classic, OperatorArg::Mico, OperatorArg::Revised, OperatorArg::Weighted]
    } else {
        args.operator.clone()
    };
    let opts = options(&args.common);
    let mut solutions = Vec::new();
    for op in ops {
        let kind = solver_kind(op, args.c);
        let sol = solve_fixed_point(kind, &mdp, &policy, Init::Zero, &opts)?;
        write_solution(&dir, &format!("{}_", kind.name()), &mdp, &sol)?;
        solutions.push((kind, sol));
    }
    let gaps = reward_gap_comparison(&mdp, &policy);
    io::write_matrix_csv(&dir.join("delta1.csv"), mdp.state_names(), &gaps.delta1)?;
    io::write_matrix_csv(&dir.join("delta2.csv"), mdp.state_names(), &gaps.delta2)?;

    let file = dir.join("compare.csv");
    let err = |source| IoError::Csv {
        path: file.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&file).map_err(err)?;
    let mut header = vec!["state_i".to_string(), "state_j".to_string()];
    header.extend(solutions.iter().map(|(k, _)| k.name().to_string()));
    header.extend(["delta1".to_string(), "delta2".to_string()]);
    w.write_record(&header).map_err(err)?;
    let names = mdp.state_names();
    for i in 0..mdp.n_states() {
        for j in i..mdp.n_states() {
            let mut record = vec![names[i].clone(), names[j].clone()];
            record.extend(solutions.iter().map(|(_, s)| io::fmt_float(s.u.get(i, j))));
            record.push(io::fmt_float(gaps.delta1[[i, j]]));
            record.push(io::fmt_float(gaps.delta2[[i, j]]));
            w.write_record(&record).map_err(err)?;
        }
    }
    w.flush().map_err(|source| IoError::Io {
        path: file.clone(),
        source,
    })?;

    let summaries: Vec<SolveSummary> = solutions
        .iter()
        .map(|(k, s)| summary(*k, &mdp, args.common.tol, s))
        .collect();
    io::write_json(&dir.join("summary.json"), &summaries)?;
    let mut code = EXIT_OK;
    for (kind, sol) in &solutions {
        if !sol.trace.converged {
            report_nonconvergence(kind.name(), sol);
            code = EXIT_NONCONVERGED;
        }
    }
    if code == EXIT_OK {
        println!("compared {} operators on {} states", solutions.len(), mdp.n_states());
    }
    Ok(code)
}

/// Property checks run per MDP.
pub const CHECKS: [&str; 8] = [
    "contraction",
    "uniqueness",
    "geometric-rate",
    "symmetry",
    "value-bound",
    "q-bound",
    "reward-gap",
    "transport-duality",
];

#[derive(Debug, Clone, Serialize)]
pub struct CaseOutcome {
    pub case: usize,
    pub pass: bool,
    /// Largest excess over the allowed bound (nonpositive when passing).
    pub worst: f64,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: &'static str,
    pub pass: bool,
    pub cases: usize,
    pub worst: f64,
    pub failures: Vec<CaseOutcome>,
}

struct Tally {
    worst: f64,
    detail: String,
}

impl Tally {
    fn new() -> Self {
        Self {
            worst: f64::NEG_INFINITY,
            detail: String::new(),
        }
    }

    fn record(&mut self, excess: f64, what: impl FnOnce() -> String) {
        if excess > self.worst || excess.is_nan() {
            self.worst = if excess.is_nan() { f64::INFINITY } else { excess };
            self.detail = what();
        }
    }

    fn outcome(self, case: usize) -> CaseOutcome {
        let pass = self.worst <= 0.0;
        CaseOutcome {
            case,
            pass,
            worst: self.worst,
            detail: if pass { String::new() } else { self.detail },
        }
    }
}

/// Allowance above the modulus for contraction ratios and residual decay.
const RATIO_SLACK: f64 = 1e-12;

fn check_case(
    case: usize,
    mdp: &TabularMdp,
    policy: &PolicyTable,
    opts: &SolveOptions,
    seed: u64,
    fault: Option<Fault>,
) -> Result<Vec<CaseOutcome>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64 + (1 << 32));
    let gamma = mdp.gamma();
    let scale = mdp.metric_upper_bound().max(1.0);

    let mut contraction = Tally::new();
    let faulty = match fault {
        Some(Fault::NegateGamma) => mdp.with_gamma(-gamma),
        None => mdp.clone(),
    };
    let mut ops = vec![Operator::RevisedGU, Operator::RevisedUG, Operator::Classic, Operator::Mico];
    for c in [0.25, 0.5, 0.75] {
        ops.push(Operator::Weighted { c });
        ops.push(Operator::WeightedGU { c });
    }
    for op in ops {
        let n = op.input_size(mdp);
        let a = random_symmetric_table(&mut rng, n, scale);
        let b = random_symmetric_table(&mut rng, n, scale);
        let bound = op.modulus(faulty.gamma());
        let ratio = contraction_ratio(op, &faulty, policy, a.view(), b.view())?;
        contraction.record(ratio - bound - RATIO_SLACK, || format!("{op:?}: ratio {ratio} above modulus {bound}"));
    }

    let mut uniqueness = Tally::new();
    let mut rate = Tally::new();
    let mut symmetry = Tally::new();
    let mut revised = None;
    for kind in [SolverKind::Revised, SolverKind::Mico, SolverKind::Classic, SolverKind::Weighted { c: 0.5 }] {
        let low = solve_fixed_point(kind, mdp, policy, Init::Zero, opts)?;
        let high = solve_fixed_point(kind, mdp, policy, Init::Constant(mdp.metric_upper_bound()), opts)?;
        let name = kind.name();
        if !(low.trace.converged && high.trace.converged) {
            uniqueness.record(f64::INFINITY, || format!("{name}: a solve did not converge"));
        }
        let mut gap = low.u.sup_distance(&high.u);
        if let (Some(a), Some(b)) = (&low.g, &high.g) {
            gap = gap.max(a.sup_distance(b));
        }
        uniqueness.record(gap - 10.0 * opts.tol, || format!("{name}: zero and upper-bound starts differ by {gap:e}"));
        let rho = kind.modulus(gamma);
        for sol in [&low, &high] {
            let excess = sol.trace.max_rate_excess(rho);
            rate.record(excess - RATIO_SLACK, || format!("{name}: residual ratio exceeds {rho} by {excess:e}"));
            let asym = sol.u.max_asymmetry().max(sol.g.as_ref().map_or(0.0, |g| g.max_asymmetry()));
            let negative = -sol.u.values().iter().fold(0.0_f64, |m, &v| m.min(v));
            symmetry.record(asym.max(negative), || format!("{name}: asymmetry {asym:e}, negative entry {negative:e}"));
        }
        if kind == SolverKind::Revised {
            revised = Some(low);
        }
    }
    let revised = revised.expect("revised solved above");

    let mut value_bound = Tally::new();
    let v = check_value_bound(mdp, policy, &revised.u, opts.tol)?;
    value_bound.record(v.max_violation - v.tolerance, || format!("pair {:?} violates by {:e}", v.worst_pair, v.max_violation));
    let mut q_bound = Tally::new();
    let q = check_q_bound(mdp, policy, revised.g.as_ref().expect("joint solve"), opts.tol)?;
    q_bound.record(q.max_violation - q.tolerance, || format!("pair {:?} violates by {:e}", q.worst_pair, q.max_violation));

    let mut reward_gap = Tally::new();
    let excess = reward_gap_comparison(mdp, policy).max_excess();
    reward_gap.record(excess - 1e-12, || format!("delta2 exceeds delta1 by {excess:e}"));

    let mut duality = Tally::new();
    let p = marginal_transitions(mdp, policy);
    for i in 0..mdp.n_states() {
        for j in i..mdp.n_states() {
            let mu = DiscreteDistribution::new(p.row(i).to_vec())?;
            let nu = DiscreteDistribution::new(p.row(j).to_vec())?;
            let cost = revised.u.values().view();
            let plan = wasserstein1(&mu, &nu, cost)?;
            let gap = (plan.dual_value(&mu, &nu) - plan.value).abs();
            let infeasible = plan.dual_infeasibility(cost);
            duality.record(gap.max(infeasible) - 1e-9, || {
                format!("states ({i}, {j}): duality gap {gap:e}, dual infeasibility {infeasible:e}")
            });
        }
    }

    Ok([contraction, uniqueness, rate, symmetry, value_bound, q_bound, reward_gap, duality]
        .into_iter()
        .map(|t| t.outcome(case))
        .collect())
}

/// Runs every check on each MDP and gathers one report per check.
pub fn run_checks(
    problems: &[(TabularMdp, PolicyTable)],
    opts: &SolveOptions,
    seed: u64,
    fault: Option<Fault>,
) -> Result<Vec<CheckReport>, CliError> {
    let per_case: Vec<Vec<CaseOutcome>> = problems
        .par_iter()
        .enumerate()
        .map(|(case, (mdp, pi))| check_case(case, mdp, pi, opts, seed, fault))
        .collect::<Result<_, _>>()?;
    Ok(CHECKS
        .iter()
        .enumerate()
        .map(|(k, &check)| {
            let outcomes: Vec<&CaseOutcome> = per_case.iter().map(|c| &c[k]).collect();
            CheckReport {
                check,
                pass: outcomes.iter().all(|o| o.pass),
                cases: outcomes.len(),
                worst: outcomes.iter().map(|o| o.worst).fold(f64::NEG_INFINITY, f64::max),
                failures: outcomes.into_iter().filter(|o| !o.pass).cloned().collect(),
            }
        })
        .collect())
}

fn print_closed_forms(report: &ClosedFormReport) {
    for c in &report.checks {
        println!(
            "{} {}: expected {}, got {}, error {:e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.quantity,
            c.expected,
            c.actual,
            c.abs_error
        );
    }
}

fn verify(args: &VerifyArgs) -> Result<i32, CliError> {
    let dir = out_dir(&args.common)?;
    if args.toy {
        let report = match args.common.mdp.as_deref() {
            Some(path) => {
                let (mdp, pi) = load(&args.common, path)?;
                check_toy_closed_forms(&mdp, &pi)?
            }
            None => verify_toy_closed_forms(args.common.gamma.unwrap_or(0.9))?,
        };
        io::write_json(&dir.join("toy_closed_forms.json"), &report)?;
        print_closed_forms(&report);
        return Ok(if report.all_pass() {
            EXIT_OK
        } else {
            let names: Vec<&str> = report.failures().map(|c| c.quantity.as_str()).collect();
            eprintln!("check failed: toy closed forms ({})", names.join(", "));
            EXIT_FAILURE
        });
    }

    let problems = match args.common.mdp.as_deref() {
        Some(path) => vec![load(&args.common, path)?],
        None => {
            let spec = SuiteSpec::default();
            (0..args.cases as u64)
                .map(|k| {
                    let (mdp, pi) = suite_instance(args.common.seed, k, &spec);
                    match args.common.gamma {
                        Some(g) => (mdp.with_gamma(g), pi),
                        None => (mdp, pi),
                    }
                })
                .collect()
        }
    };
    if problems.is_empty() {
        return Err(CliError::Usage("--cases must be positive".into()));
    }
    let reports = run_checks(&problems, &options(&args.common), args.common.seed, args.fault)?;
    let checks_dir = dir.join("checks");
    io::create_dir(&checks_dir)?;
    for r in &reports {
        io::write_json(&checks_dir.join(format!("{}.json", r.check)), r)?;
        println!(
            "{} {} ({} cases, worst excess {:e})",
            if r.pass { "PASS" } else { "FAIL" },
            r.check,
            r.cases,
            r.worst
        );
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        seed: u64,
        cases: usize,
        pass: bool,
        failed: Vec<&'a str>,
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check).collect();
    io::write_json(
        &dir.join("summary.json"),
        &Summary {
            seed: args.common.seed,
            cases: problems.len(),
            pass: failed.is_empty(),
            failed: failed.clone(),
        },
    )?;
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("check failed: {}", failed.join(", "));
        Ok(EXIT_FAILURE)
    }
}

/// Training configuration from the command line.
pub fn train_config(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        distance: match args.distance {
            DistanceArg::Mico => DistanceKind::Mico,
            DistanceArg::Simsr => DistanceKind::Simsr,
        },
        beta: args.beta,
        embed_dim: args.embed_dim,
        batch_size: args.batch,
        learning_rate: args.lr,
        c_learning_rate: args.c_lr,
        steps: args.steps,
        seed: args.common.seed,
        loss: match args.loss {
            LossArg::Squared => LossKind::Squared,
            LossArg::Huber => LossKind::Huber,
        },
        c_record_interval: args.record_interval,
        ..TrainConfig::default()
    }
}

/// Model initialized from the run's seed.
pub fn initial_model(mdp: &TabularMdp, config: &TrainConfig) -> Result<EmbeddingModel, ReprError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    EmbeddingModel::init(
        &mut rng,
        mdp.n_states(),
        mdp.n_actions(),
        config.embed_dim,
        config.distance == DistanceKind::Simsr,
    )
}

fn train_cmd(args: &TrainArgs) -> Result<i32, CliError> {
    let path = require_mdp(&args.common)?;
    let (mdp, policy) = load(&args.common, path)?;
    let dir = out_dir(&args.common)?;
    let config = train_config(args);
    let mut model = initial_model(&mdp, &config)?;
    let trace = train(&mut model, &mdp, &policy, &config)?;

    io::write_train_trace_csv(&dir.join("trace.csv"), &trace)?;
    io::write_c_curve_csv(&dir.join("c_curve.csv"), &trace)?;
    io::write_matrix_csv(&dir.join("distances.csv"), mdp.state_names(), trace.final_distance_table.values())?;

    let window = args.window.min(trace.c_deltas.len());
    let monitor = if window == 0 {
        None
    } else {
        Some(monitor_c(&trace, args.epsilon, window).expect("window fits the trace"))
    };
    #[derive(Serialize)]
    struct Summary {
        config: TrainConfig,
        steps: usize,
        first_encoder_loss: Option<f64>,
        last_encoder_loss: Option<f64>,
        self_distances: Vec<f64>,
        monitor: Option<bisimlab::representation::CoefficientReport>,
    }
    let table = &trace.final_distance_table;
    io::write_json(
        &dir.join("summary.json"),
        &Summary {
            config: config.clone(),
            steps: trace.encoder_losses.len(),
            first_encoder_loss: trace.encoder_losses.first().copied(),
            last_encoder_loss: trace.encoder_losses.last().copied(),
            self_distances: (0..table.len()).map(|s| table.get(s, s)).collect(),
            monitor: monitor.clone(),
        },
    )?;
    match monitor {
        Some(m) => println!(
            "coefficient {}: max delta {:e} over the last {} records (epsilon {:e}), final c {}",
            if m.satisfied { "settled" } else { "not settled" },
            m.max_tail_delta,
            m.window,
            m.epsilon,
            m.final_c
        ),
        None => println!("coefficient: no records (steps below the record interval)"),
    }
    Ok(EXIT_OK)
}
