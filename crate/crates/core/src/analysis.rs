//! Checks of the metric guarantees on concrete MDPs, the three-state toy
//! example, and state aggregation by metric threshold.

use ndarray::{array, Array2, Array3};
use serde::Serialize;
use thiserror::Error;

use crate::mdp::{marginal_rewards, policy_values, PolicyTable, TabularMdp};
use crate::metric::{solve_fixed_point, Init, MetricError, PairMetric, SolveOptions, SolverKind, StateMetric};

/// Tolerance for the exact policy evaluation behind the bound checks.
const VALUE_TOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("gamma = {0} is outside (0, 1)")]
    GammaRange(f64),
    #[error("{what} has size {found}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// Outcome of a `|lhs(i) - lhs(j)| <= rhs(i, j)` check over all pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    /// `max_{i,j} |lhs(i) - lhs(j)| - rhs(i, j)`; negative means slack.
    pub max_violation: f64,
    pub worst_pair: (usize, usize),
    pub satisfied: bool,
    pub tolerance: f64,
}

fn bound_report(lhs: &[f64], rhs: &Array2<f64>, tolerance: f64) -> BoundReport {
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst_pair = (0, 0);
    for (i, a) in lhs.iter().enumerate() {
        for (j, b) in lhs.iter().enumerate() {
            let excess = (a - b).abs() - rhs[[i, j]];
            if excess > max_violation {
                max_violation = excess;
                worst_pair = (i, j);
            }
        }
    }
    BoundReport {
        max_violation,
        worst_pair,
        satisfied: max_violation <= tolerance,
        tolerance,
    }
}

fn value_iteration_budget(gamma: f64) -> usize {
    // Enough sweeps for a 1e-13 residual from zero with |r| up to ~1e3.
    ((1e-16_f64.ln() / gamma.ln()).ceil() as usize).max(100) * 2
}

/// `|V(s_i) - V(s_j)| <= U(s_i, s_j)`, checked up to `10 * tol`.
pub fn check_value_bound(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    u_fixed: &StateMetric,
    tol: f64,
) -> Result<BoundReport, AnalysisError> {
    if u_fixed.len() != mdp.n_states() {
        return Err(AnalysisError::Dimension {
            what: "state metric",
            expected: mdp.n_states(),
            found: u_fixed.len(),
        });
    }
    let values = policy_values(mdp, policy, VALUE_TOL, value_iteration_budget(mdp.gamma()));
    Ok(bound_report(values.v.as_slice().expect("contiguous"), u_fixed.values(), 10.0 * tol))
}

/// `|Q(x) - Q(y)| <= G(x, y)` over state-action pairs, checked up to `10 * tol`.
pub fn check_q_bound(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    g_fixed: &PairMetric,
    tol: f64,
) -> Result<BoundReport, AnalysisError> {
    if g_fixed.len() != mdp.n_pairs() {
        return Err(AnalysisError::Dimension {
            what: "pair metric",
            expected: mdp.n_pairs(),
            found: g_fixed.len(),
        });
    }
    let values = policy_values(mdp, policy, VALUE_TOL, value_iteration_budget(mdp.gamma()));
    let q: Vec<f64> = values.q.iter().copied().collect();
    Ok(bound_report(&q, g_fixed.values(), 10.0 * tol))
}

/// Expected absolute reward gap versus absolute gap of expected rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct GapComparison {
    /// `E_{a_i, a_j} |r(s_i, a_i) - r(s_j, a_j)|` with independent actions.
    pub delta1: Array2<f64>,
    /// `|E r(s_i, .) - E r(s_j, .)|`.
    pub delta2: Array2<f64>,
}

impl GapComparison {
    /// `max (delta2 - delta1)`; at most zero up to rounding.
    pub fn max_excess(&self) -> f64 {
        self.delta2
            .iter()
            .zip(self.delta1.iter())
            .fold(f64::NEG_INFINITY, |m, (d2, d1)| m.max(d2 - d1))
    }
}

pub fn reward_gap_comparison(mdp: &TabularMdp, policy: &PolicyTable) -> GapComparison {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let r = mdp.reward();
    let r_pi = marginal_rewards(mdp, policy);
    let mut delta1 = Array2::zeros((ns, ns));
    let mut delta2 = Array2::zeros((ns, ns));
    for i in 0..ns {
        for j in i..ns {
            let mut expected_gap = 0.0;
            for ai in 0..na {
                for aj in 0..na {
                    expected_gap += policy.prob(i, ai) * policy.prob(j, aj) * (r[[i, ai]] - r[[j, aj]]).abs();
                }
            }
            let gap = (r_pi[i] - r_pi[j]).abs();
            delta1[[i, j]] = expected_gap;
            delta1[[j, i]] = expected_gap;
            delta2[[i, j]] = gap;
            delta2[[j, i]] = gap;
        }
    }
    GapComparison { delta1, delta2 }
}

/// The three-state example: states `s1, s2, s3`, actions `a0, a1, a2`.
///
/// `a0` loops in place everywhere; `a1` takes `s1` to `s3` and `a2` takes
/// `s2` to `s3`. Rewards are `r(s1, a1) = r(s2, a2) = 1`, `r(s3, a0) = 1/2`
/// and 0 elsewhere. The policy splits evenly between `a0` and the outgoing
/// action in `s1` and `s2`, and plays `a0` in `s3`. Cells the example leaves
/// open are self-loops with reward 0 and no policy mass. Discount 0.9.
pub fn toy_example_mdp() -> (TabularMdp, PolicyTable) {
    let mut transition = Array3::zeros((3, 3, 3));
    for s in 0..3 {
        for a in 0..3 {
            transition[[s, a, s]] = 1.0;
        }
    }
    transition[[0, 1, 0]] = 0.0;
    transition[[0, 1, 2]] = 1.0;
    transition[[1, 2, 1]] = 0.0;
    transition[[1, 2, 2]] = 1.0;
    let reward = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.0, 0.0]];
    let mdp = TabularMdp::new(transition, reward, 0.9)
        .and_then(|m| {
            m.with_names(
                vec!["s1".into(), "s2".into(), "s3".into()],
                vec!["a0".into(), "a1".into(), "a2".into()],
            )
        })
        .expect("toy example is well formed");
    let policy = PolicyTable::new(array![[0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [1.0, 0.0, 0.0]])
        .expect("toy policy is nonempty");
    (mdp, policy)
}

/// One compared quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormCheck {
    pub quantity: String,
    pub expected: f64,
    pub actual: f64,
    pub abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormReport {
    pub gamma: f64,
    pub tolerance: f64,
    pub checks: Vec<ClosedFormCheck>,
}

impl ClosedFormReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ClosedFormCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

pub const CLOSED_FORM_TOL: f64 = 1e-8;

/// Solves the toy example at `gamma` and compares against the published
/// closed forms.
pub fn verify_toy_closed_forms(gamma: f64) -> Result<ClosedFormReport, AnalysisError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(AnalysisError::GammaRange(gamma));
    }
    let (mdp, policy) = toy_example_mdp();
    check_toy_closed_forms(&mdp.with_gamma(gamma), &policy)
}

/// The closed-form comparison on any three-state MDP laid out like the toy
/// example (used to probe reward variants).
pub fn check_toy_closed_forms(mdp: &TabularMdp, policy: &PolicyTable) -> Result<ClosedFormReport, AnalysisError> {
    if mdp.n_states() != 3 {
        return Err(AnalysisError::Dimension {
            what: "toy MDP state count",
            expected: 3,
            found: mdp.n_states(),
        });
    }
    let gamma = mdp.gamma();
    let opts = SolveOptions::with_tol(1e-12);
    let revised = solve_fixed_point(SolverKind::Revised, mdp, policy, Init::Zero, &opts)?.u;
    let classic = solve_fixed_point(SolverKind::Classic, mdp, policy, Init::Zero, &opts)?.u;

    let u12 = 2.0 / ((2.0 - gamma) * (4.0 - gamma));
    let u13 = 1.0 / (4.0 - 2.0 * gamma);
    let expectations = [
        ("revised U(s1,s2)", u12, revised.get(0, 1)),
        ("revised U(s1,s3)", u13, revised.get(0, 2)),
        ("revised U(s3,s2)", u13, revised.get(2, 1)),
        ("revised U(s3,s3)", 0.0, revised.get(2, 2)),
        ("classic d(s1,s2)", 0.0, classic.get(0, 1)),
        ("classic d(s1,s3)", 0.0, classic.get(0, 2)),
        ("classic d(s2,s3)", 0.0, classic.get(1, 2)),
        ("classic d(s3,s3)", 0.0, classic.get(2, 2)),
    ];
    let checks = expectations
        .into_iter()
        .map(|(quantity, expected, actual)| {
            let abs_error = (expected - actual).abs();
            ClosedFormCheck {
                quantity: quantity.to_string(),
                expected,
                actual,
                abs_error,
                pass: abs_error <= CLOSED_FORM_TOL,
            }
        })
        .collect();
    Ok(ClosedFormReport {
        gamma,
        tolerance: CLOSED_FORM_TOL,
        checks,
    })
}

/// Single-linkage clusters at threshold `epsilon`: the connected components
/// of `u(i, j) <= epsilon`. Clusters are sorted by their smallest member and
/// members are ascending.
pub fn aggregate_states(u: &StateMetric, epsilon: f64) -> Vec<Vec<usize>> {
    let n = u.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if u.get(i, j) <= epsilon {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(i);
    }
    clusters
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            r[k] = mean;
        }
        start = end;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// input is constant.
///
/// # Panics
/// If the inputs differ in length.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// Strict upper-triangle entries in row-major order.
pub fn off_diagonal(table: &Array2<f64>) -> Vec<f64> {
    let n = table.nrows();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| table[[i, j]])
        .collect()
}
