//! Finite Markov decision processes, stochastic policies, exact policy
//! evaluation and transition sampling.
//!
//! State-action pairs are flattened to a single index `s * n_actions + a`
//! wherever the joint space `S x A` is needed (see [`TabularMdp::pair_index`]).

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

/// Tolerance applied to every probability row sum.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("an MDP needs at least one state and one action")]
    Empty,
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
}

/// A finite MDP `(S, A, P, R, gamma)`.
///
/// Construction only checks shapes. Value-level invariants (row-stochastic
/// transitions, finite rewards, `0 < gamma < 1`) are reported by
/// [`validate_mdp`], so that malformed inputs can be inspected rather than
/// rejected outright.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    transition: Array3<f64>,
    reward: Array2<f64>,
    gamma: f64,
    state_names: Vec<String>,
    action_names: Vec<String>,
}

impl TabularMdp {
    /// `transition` is indexed `[state][action][next_state]`, `reward` is
    /// indexed `[state][action]`.
    pub fn new(transition: Array3<f64>, reward: Array2<f64>, gamma: f64) -> Result<Self, MdpError> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Empty);
        }
        if n_next != n_states {
            return Err(MdpError::Shape {
                what: "transition",
                expected: vec![n_states, n_actions, n_states],
                found: vec![n_states, n_actions, n_next],
            });
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(MdpError::Shape {
                what: "reward",
                expected: vec![n_states, n_actions],
                found: reward.shape().to_vec(),
            });
        }
        Ok(Self {
            transition,
            reward,
            gamma,
            state_names: (0..n_states).map(|s| format!("s{s}")).collect(),
            action_names: (0..n_actions).map(|a| format!("a{a}")).collect(),
        })
    }

    pub fn with_names(mut self, states: Vec<String>, actions: Vec<String>) -> Result<Self, MdpError> {
        if states.len() != self.n_states() {
            return Err(MdpError::Shape {
                what: "state names",
                expected: vec![self.n_states()],
                found: vec![states.len()],
            });
        }
        if actions.len() != self.n_actions() {
            return Err(MdpError::Shape {
                what: "action names",
                expected: vec![self.n_actions()],
                found: vec![actions.len()],
            });
        }
        self.state_names = states;
        self.action_names = actions;
        Ok(self)
    }

    /// Same MDP with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }

    pub fn n_states(&self) -> usize {
        self.transition.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.transition.dim().1
    }

    /// Size of the joint space `X = S x A`.
    pub fn n_pairs(&self) -> usize {
        self.n_states() * self.n_actions()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    /// Next-state distribution `P(. | s, a)`.
    pub fn next_distribution(&self, s: usize, a: usize) -> ArrayView1<'_, f64> {
        self.transition.slice(ndarray::s![s, a, ..])
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn action_names(&self) -> &[String] {
        &self.action_names
    }

    /// Flattened index of the pair `(s, a)`.
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions() + a
    }

    /// Inverse of [`pair_index`](Self::pair_index).
    pub fn pair_of(&self, x: usize) -> (usize, usize) {
        (x / self.n_actions(), x % self.n_actions())
    }

    pub fn pair_name(&self, x: usize) -> String {
        let (s, a) = self.pair_of(x);
        format!("{}:{}", self.state_names[s], self.action_names[a])
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// `2 max|r| / (1 - gamma)`, the constant upper bound every metric
    /// fixed point (and |V| gap) stays below.
    pub fn metric_upper_bound(&self) -> f64 {
        2.0 * self.max_abs_reward() / (1.0 - self.gamma)
    }

    /// Transition tensor reshaped to a `|X| x |S|` matrix, row `x = (s, a)`.
    pub fn pair_transition_matrix(&self) -> Array2<f64> {
        let (n_s, n_a, _) = self.transition.dim();
        self.transition
            .to_shape((n_s * n_a, n_s))
            .expect("contiguous transition tensor")
            .to_owned()
    }

    /// Rewards flattened over `X`.
    pub fn pair_rewards(&self) -> Array1<f64> {
        self.reward.iter().copied().collect()
    }

    fn check_state(&self, s: usize) -> Result<(), MdpError> {
        if s >= self.n_states() {
            return Err(MdpError::IndexOutOfRange {
                what: "state",
                index: s,
                size: self.n_states(),
            });
        }
        Ok(())
    }
}

/// A stochastic policy `pi(a | s)` stored as a row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    probs: Array2<f64>,
}

impl PolicyTable {
    pub fn new(probs: Array2<f64>) -> Result<Self, MdpError> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(MdpError::Empty);
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Puts all mass on `actions[s]` in each state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    pub fn row(&self, s: usize) -> ArrayView1<'_, f64> {
        self.probs.row(s)
    }

    /// True when every row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.probs
            .rows()
            .into_iter()
            .all(|row| row.iter().filter(|&&p| p > 0.0).count() == 1)
    }

    /// The `|S| x |X|` matrix with `pi(a|s)` at column `s * |A| + a`, used to
    /// take action expectations of pair tables.
    pub fn expectation_matrix(&self) -> Array2<f64> {
        let (n_s, n_a) = self.probs.dim();
        let mut m = Array2::zeros((n_s, n_s * n_a));
        for s in 0..n_s {
            for a in 0..n_a {
                m[[s, s * n_a + a]] = self.probs[[s, a]];
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    RowSum,
    NegativeProbability,
    NonFinite,
    GammaRange,
    PolicyRowSum,
    PolicyNegative,
    PolicyShape,
}

/// Which row of which table a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "table")]
pub enum Location {
    Transition { state: usize, action: usize },
    Reward { state: usize, action: usize },
    Policy { state: usize },
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub location: Location,
    /// Size of the breach: `|sum - 1|` for row sums, `|p|` for negative
    /// entries, the offending value for gamma and non-finite entries.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every value-level invariant of an MDP and policy.
///
/// Violations are returned as data; nothing here fails.
pub fn validate_mdp(mdp: &TabularMdp, policy: &PolicyTable) -> ValidationReport {
    let mut violations = Vec::new();
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());

    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        violations.push(Violation {
            kind: ViolationKind::GammaRange,
            location: Location::Gamma,
            magnitude: mdp.gamma,
        });
    }

    for s in 0..n_s {
        for a in 0..n_a {
            let row = mdp.next_distribution(s, a);
            let location = Location::Transition { state: s, action: a };
            check_distribution(
                row,
                location,
                (ViolationKind::RowSum, ViolationKind::NegativeProbability),
                &mut violations,
            );
            let r = mdp.reward[[s, a]];
            if !r.is_finite() {
                violations.push(Violation {
                    kind: ViolationKind::NonFinite,
                    location: Location::Reward { state: s, action: a },
                    magnitude: r,
                });
            }
        }
    }

    if policy.probs.dim() != (n_s, n_a) {
        violations.push(Violation {
            kind: ViolationKind::PolicyShape,
            location: Location::Policy { state: policy.probs.nrows() },
            magnitude: (policy.probs.nrows() * policy.probs.ncols()) as f64,
        });
    } else {
        for s in 0..n_s {
            check_distribution(
                policy.row(s),
                Location::Policy { state: s },
                (ViolationKind::PolicyRowSum, ViolationKind::PolicyNegative),
                &mut violations,
            );
        }
    }

    ValidationReport { violations }
}

fn check_distribution(
    row: ArrayView1<'_, f64>,
    location: Location,
    (sum_kind, negative_kind): (ViolationKind, ViolationKind),
    out: &mut Vec<Violation>,
) {
    if let Some(bad) = row.iter().find(|p| !p.is_finite()) {
        out.push(Violation {
            kind: ViolationKind::NonFinite,
            location,
            magnitude: *bad,
        });
        return;
    }
    let most_negative = row.iter().fold(0.0_f64, |m, &p| m.min(p));
    if most_negative < 0.0 {
        out.push(Violation {
            kind: negative_kind,
            location,
            magnitude: -most_negative,
        });
    }
    let gap = (row.sum() - 1.0).abs();
    if gap > PROB_SUM_TOL {
        out.push(Violation {
            kind: sum_kind,
            location,
            magnitude: gap,
        });
    }
}

/// `r_s^pi = sum_a pi(a|s) r(s, a)`.
pub fn marginal_reward(mdp: &TabularMdp, policy: &PolicyTable, s: usize) -> Result<f64, MdpError> {
    mdp.check_state(s)?;
    Ok(policy.row(s).dot(&mdp.reward.row(s)))
}

/// `P_s^pi = sum_a pi(a|s) P(. | s, a)`.
pub fn marginal_transition(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    s: usize,
) -> Result<Array1<f64>, MdpError> {
    mdp.check_state(s)?;
    Ok(policy.row(s).dot(&mdp.transition.index_axis(Axis(0), s)))
}

/// All marginal rewards at once.
pub fn marginal_rewards(mdp: &TabularMdp, policy: &PolicyTable) -> Array1<f64> {
    (&mdp.reward * &policy.probs).sum_axis(Axis(1))
}

/// The `|S| x |S|` policy-averaged transition matrix.
pub fn marginal_transitions(mdp: &TabularMdp, policy: &PolicyTable) -> Array2<f64> {
    let n = mdp.n_states();
    let mut p = Array2::zeros((n, n));
    for s in 0..n {
        p.row_mut(s)
            .assign(&policy.row(s).dot(&mdp.transition.index_axis(Axis(0), s)));
    }
    p
}

/// Result of exact policy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    /// `max_s |v(s) - (T^pi v)(s)|` for the returned `v`.
    pub residual: f64,
    pub tol: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Evaluates `V^pi` and `Q^pi` by Jacobi iteration of the Bellman
/// evaluation operator.
///
/// Stops as soon as the Bellman residual of the current iterate is `<= tol`;
/// after `max_iters` updates without reaching it the table comes back with
/// `converged == false`.
pub fn policy_values(mdp: &TabularMdp, policy: &PolicyTable, tol: f64, max_iters: usize) -> ValueTable {
    let r_pi = marginal_rewards(mdp, policy);
    let p_pi = marginal_transitions(mdp, policy);
    let gamma = mdp.gamma;

    let mut v = Array1::<f64>::zeros(mdp.n_states());
    let mut iterations = 0;
    let (v, residual, converged) = loop {
        let backup = &r_pi + &(p_pi.dot(&v) * gamma);
        let residual = sup_distance(backup.view(), v.view());
        if residual <= tol {
            break (v, residual, true);
        }
        if iterations == max_iters {
            break (v, residual, false);
        }
        v = backup;
        iterations += 1;
    };

    let p = mdp.pair_transition_matrix();
    let q_flat = mdp.pair_rewards() + p.dot(&v) * gamma;
    let q = q_flat
        .into_shape_with_order((mdp.n_states(), mdp.n_actions()))
        .expect("pair layout");

    ValueTable {
        v,
        q,
        residual,
        tol,
        iterations,
        converged,
    }
}

fn sup_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// One simulated step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Draws `a ~ pi(.|s)`, then `s' ~ P(.|s, a)`.
pub fn sample_transition<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    rng: &mut R,
    s: usize,
) -> Result<Transition, MdpError> {
    mdp.check_state(s)?;
    let action = sample_categorical(policy.row(s), rng);
    let next_state = sample_categorical(mdp.next_distribution(s, action), rng);
    Ok(Transition {
        state: s,
        action,
        reward: mdp.reward[[s, action]],
        next_state,
    })
}

/// Inverse-CDF draw that never returns a zero-probability index.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(weights: ArrayView1<'_, f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Borrowed `(mdp, policy)` pair.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub mdp: &'a TabularMdp,
    pub policy: &'a PolicyTable,
}

impl<'a> Problem<'a> {
    pub fn new(mdp: &'a TabularMdp, policy: &'a PolicyTable) -> Self {
        Self { mdp, policy }
    }
}

/// Helper for tests and generators: builds a transition tensor from nested
/// vectors, checking rectangularity.
pub fn tensor3(rows: Vec<Vec<Vec<f64>>>) -> Result<Array3<f64>, MdpError> {
    let n0 = rows.len();
    let n1 = rows.first().map_or(0, Vec::len);
    let n2 = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(n0 * n1 * n2);
    for (i, plane) in rows.iter().enumerate() {
        if plane.len() != n1 {
            return Err(MdpError::Shape {
                what: "transition",
                expected: vec![n0, n1, n2],
                found: vec![i, plane.len()],
            });
        }
        for (j, row) in plane.iter().enumerate() {
            if row.len() != n2 {
                return Err(MdpError::Shape {
                    what: "transition",
                    expected: vec![n0, n1, n2],
                    found: vec![i, j, row.len()],
                });
            }
            flat.extend_from_slice(row);
        }
    }
    Ok(Array3::from_shape_vec((n0, n1, n2), flat).expect("checked shape"))
}

/// Nested rows to a matrix, checking rectangularity.
pub fn matrix(rows: Vec<Vec<f64>>, what: &'static str) -> Result<Array2<f64>, MdpError> {
    let n0 = rows.len();
    let n1 = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(n0 * n1);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n1 {
            return Err(MdpError::Shape {
                what,
                expected: vec![n0, n1],
                found: vec![i, row.len()],
            });
        }
        flat.extend_from_slice(row);
    }
    Ok(Array2::from_shape_vec((n0, n1), flat).expect("checked shape"))
}
