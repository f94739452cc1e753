//! Pairwise metric tables, the bisimulation-style update operators and a
//! fixed-point engine with convergence diagnostics.

use std::marker::PhantomData;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{marginal_rewards, marginal_transitions, PolicyTable, TabularMdp};
use crate::transport::{wasserstein1, DiscreteDistribution, TransportError};

/// Symmetry tolerance accepted when a table is constructed from raw data.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{what} is {found:?}, expected {expected:?}")]
    Dimension {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("table entry ({0}, {1}) is {2}")]
    InvalidEntry(usize, usize, f64),
    #[error("table is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("weight c = {0} is outside (0, 1)")]
    CoefficientRange(f64),
    #[error("tables coincide; contraction ratio is undefined")]
    ZeroDenominator,
    #[error("tolerance must be positive and finite, got {0}")]
    Tolerance(f64),
}

/// Marker for tables indexed by states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct States;

/// Marker for tables indexed by flattened state-action pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pairs;

/// A symmetric, nonnegative, finite square table of distances.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable<K> {
    values: Array2<f64>,
    kind: PhantomData<K>,
}

/// `U`: distances between states.
pub type StateMetric = MetricTable<States>;
/// `G`: distances between state-action pairs, indexed by `s * |A| + a`.
pub type PairMetric = MetricTable<Pairs>;

impl<K> MetricTable<K> {
    pub fn new(values: Array2<f64>) -> Result<Self, MetricError> {
        let (r, c) = values.dim();
        if r != c {
            return Err(MetricError::Dimension {
                what: "metric table",
                expected: (r, r),
                found: (r, c),
            });
        }
        for ((i, j), &v) in values.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(MetricError::InvalidEntry(i, j, v));
            }
            if j > i && (v - values[[j, i]]).abs() > SYMMETRY_TOL {
                return Err(MetricError::Asymmetric(i, j));
            }
        }
        Ok(Self::wrap(values))
    }

    fn wrap(values: Array2<f64>) -> Self {
        Self {
            values,
            kind: PhantomData,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::wrap(Array2::zeros((n, n)))
    }

    /// # Panics
    /// If `k` is negative or not finite.
    pub fn constant(n: usize, k: f64) -> Self {
        assert!(k.is_finite() && k >= 0.0, "constant table needs k >= 0, got {k}");
        Self::wrap(Array2::from_elem((n, n), k))
    }

    /// Evaluates `f` on the upper triangle and mirrors it, so the result is
    /// exactly symmetric.
    pub(crate) fn from_upper(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                values[[i, j]] = v;
                values[[j, i]] = v;
            }
        }
        Self::wrap(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_entry(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        sup_diff(self.values.view(), other.values.view())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::wrap(&self.values * k)
    }

    pub fn max_asymmetry(&self) -> f64 {
        sup_diff(self.values.view(), self.values.t())
    }
}

fn sup_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn expect_dim(what: &'static str, found: (usize, usize), n: usize) -> Result<(), MetricError> {
    if found == (n, n) {
        Ok(())
    } else {
        Err(MetricError::Dimension {
            what,
            expected: (n, n),
            found,
        })
    }
}

fn check_policy(mdp: &TabularMdp, policy: &PolicyTable) -> Result<(), MetricError> {
    let found = policy.probs().dim();
    let expected = (mdp.n_states(), mdp.n_actions());
    if found == expected {
        Ok(())
    } else {
        Err(MetricError::Dimension {
            what: "policy",
            expected,
            found,
        })
    }
}

/// `(P T P^T)[i][j]`: the expectation of `T` under independent draws from
/// rows `i` and `j` of `P`.
fn independent_expectation(p: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
    p.dot(t).dot(&p.t())
}

fn abs_gaps(v: &Array1<f64>, i: usize, j: usize) -> f64 {
    (v[i] - v[j]).abs()
}

/// Classic pi-bisimulation update:
/// `|r_i - r_j| + gamma * W1(P_i, P_j; d)` with marginal rewards and
/// transitions. Each unordered pair is solved once per application.
pub fn apply_classic_operator(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    d: &StateMetric,
) -> Result<StateMetric, MetricError> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states();
    expect_dim("state metric", d.values.dim(), n)?;
    let r = marginal_rewards(mdp, policy);
    let p = marginal_transitions(mdp, policy);
    let rows = p
        .rows()
        .into_iter()
        .map(|row| DiscreteDistribution::new(row.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let w = wasserstein1(&rows[i], &rows[j], d.values.view())?.value;
            let v = abs_gaps(&r, i, j) + mdp.gamma() * w;
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(StateMetric::wrap(out))
}

/// MICo-style update: marginal reward gap plus the independent-coupling
/// expectation of `u` over successors.
pub fn apply_mico_operator(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    u: &StateMetric,
) -> Result<StateMetric, MetricError> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states();
    expect_dim("state metric", u.values.dim(), n)?;
    let r = marginal_rewards(mdp, policy);
    let next = independent_expectation(&marginal_transitions(mdp, policy), &u.values);
    let gamma = mdp.gamma();
    Ok(StateMetric::from_upper(n, |i, j| abs_gaps(&r, i, j) + gamma * next[[i, j]]))
}

/// `U(s_i, s_j) = E_{a_i ~ pi(s_i), a_j ~ pi(s_j)} G((s_i, a_i), (s_j, a_j))`.
pub fn apply_revised_u(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    g: &PairMetric,
) -> Result<StateMetric, MetricError> {
    check_policy(mdp, policy)?;
    expect_dim("pair metric", g.values.dim(), mdp.n_pairs())?;
    let u = independent_expectation(&policy.expectation_matrix(), &g.values);
    Ok(StateMetric::from_upper(mdp.n_states(), |i, j| u[[i, j]]))
}

/// `G(x, y) = |r(x) - r(y)| + gamma * E_{s' ~ P(x), t' ~ P(y)} U(s', t')`.
pub fn apply_revised_g(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    u: &StateMetric,
) -> Result<PairMetric, MetricError> {
    weighted_pair_update(mdp, policy, u, 1.0, mdp.gamma())
}

/// Weighted pair update `(1 - c) |r(x) - r(y)| + c * E U(s', t')`.
pub fn apply_weighted_g(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    u: &StateMetric,
    c: f64,
) -> Result<PairMetric, MetricError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(MetricError::CoefficientRange(c));
    }
    weighted_pair_update(mdp, policy, u, 1.0 - c, c)
}

fn weighted_pair_update(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    u: &StateMetric,
    reward_weight: f64,
    next_weight: f64,
) -> Result<PairMetric, MetricError> {
    check_policy(mdp, policy)?;
    expect_dim("state metric", u.values.dim(), mdp.n_states())?;
    let r = mdp.pair_rewards();
    let next = independent_expectation(&mdp.pair_transition_matrix(), &u.values);
    Ok(PairMetric::from_upper(mdp.n_pairs(), |x, y| {
        reward_weight * abs_gaps(&r, x, y) + next_weight * next[[x, y]]
    }))
}

/// A single operator (or composition) viewed as a map on raw square tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "operator")]
pub enum Operator {
    Classic,
    Mico,
    /// `F_u`: pair table to state table.
    RevisedU,
    /// `F_g`: state table to pair table.
    RevisedG,
    /// Weighted pair update at fixed `c`: state table to pair table.
    Weighted { c: f64 },
    /// `F_g . F_u` on pair tables.
    RevisedGU,
    /// `F_u . F_g` on state tables.
    RevisedUG,
    /// Weighted update after `F_u`, on pair tables.
    WeightedGU { c: f64 },
}

impl Operator {
    /// Lipschitz constant in the sup norm.
    pub fn modulus(&self, gamma: f64) -> f64 {
        match *self {
            Operator::RevisedU => 1.0,
            Operator::Weighted { c } | Operator::WeightedGU { c } => c,
            _ => gamma,
        }
    }

    pub fn input_size(&self, mdp: &TabularMdp) -> usize {
        match self {
            Operator::RevisedU | Operator::RevisedGU | Operator::WeightedGU { .. } => mdp.n_pairs(),
            _ => mdp.n_states(),
        }
    }

    pub fn apply(
        &self,
        mdp: &TabularMdp,
        policy: &PolicyTable,
        table: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>, MetricError> {
        let out = match *self {
            Operator::Classic => apply_classic_operator(mdp, policy, &StateMetric::new(table.to_owned())?)?.values,
            Operator::Mico => apply_mico_operator(mdp, policy, &StateMetric::new(table.to_owned())?)?.values,
            Operator::RevisedU => apply_revised_u(mdp, policy, &PairMetric::new(table.to_owned())?)?.values,
            Operator::RevisedG => apply_revised_g(mdp, policy, &StateMetric::new(table.to_owned())?)?.values,
            Operator::Weighted { c } => {
                apply_weighted_g(mdp, policy, &StateMetric::new(table.to_owned())?, c)?.values
            }
            Operator::RevisedGU => {
                let u = apply_revised_u(mdp, policy, &PairMetric::new(table.to_owned())?)?;
                apply_revised_g(mdp, policy, &u)?.values
            }
            Operator::RevisedUG => {
                let g = apply_revised_g(mdp, policy, &StateMetric::new(table.to_owned())?)?;
                apply_revised_u(mdp, policy, &g)?.values
            }
            Operator::WeightedGU { c } => {
                let u = apply_revised_u(mdp, policy, &PairMetric::new(table.to_owned())?)?;
                apply_weighted_g(mdp, policy, &u, c)?.values
            }
        };
        Ok(out)
    }
}

/// `||F(a) - F(b)||_inf / ||a - b||_inf`.
pub fn contraction_ratio(
    op: Operator,
    mdp: &TabularMdp,
    policy: &PolicyTable,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::Dimension {
            what: "second table",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let denom = sup_diff(a, b);
    if denom == 0.0 {
        return Err(MetricError::ZeroDenominator);
    }
    let fa = op.apply(mdp, policy, a)?;
    let fb = op.apply(mdp, policy, b)?;
    Ok(sup_diff(fa.view(), fb.view()) / denom)
}

/// Order of the two half-updates in a joint `(U, G)` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// `U' = F_u(G)`, then `G' = F_g(U')`.
    #[default]
    GaussSeidel,
    /// `(U', G') = (F_u(G), F_g(U))` from the same previous iterate.
    Jacobi,
}

/// Which fixed point to compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SolverKind {
    Classic,
    Mico,
    Revised,
    Weighted { c: f64 },
}

impl SolverKind {
    pub fn modulus(&self, gamma: f64) -> f64 {
        match *self {
            SolverKind::Weighted { c } => c,
            _ => gamma,
        }
    }

    /// Whether the solve carries a pair table alongside the state table.
    pub fn is_joint(&self) -> bool {
        matches!(self, SolverKind::Revised | SolverKind::Weighted { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Classic => "classic",
            SolverKind::Mico => "mico",
            SolverKind::Revised => "revised",
            SolverKind::Weighted { .. } => "weighted",
        }
    }
}

/// Starting point of the iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zero,
    Constant(f64),
    /// A given state table; for joint solves the pair table defaults to the
    /// pair update of `u`.
    Given { u: StateMetric, g: Option<PairMetric> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    /// `None` picks [`default_max_iters`].
    pub max_iters: Option<usize>,
    pub sweep: SweepMode,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: None,
            sweep: SweepMode::default(),
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub iterations: usize,
    /// Sup-norm change per sweep (max over both tables for joint solves).
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub final_residual: f64,
}

impl SolveTrace {
    /// Largest `r_k - rho * r_{k-1}` from the third sweep on; nonpositive
    /// when the residuals shrink by `rho` per sweep.
    pub fn max_rate_excess(&self, rho: f64) -> f64 {
        self.residuals
            .windows(2)
            .skip(1)
            .map(|w| w[1] - rho * w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub u: StateMetric,
    pub g: Option<PairMetric>,
    pub trace: SolveTrace,
}

/// Update size at which iteration stops: `tol * min(1, (1 - rho) / rho)`.
/// With this rule the distance to the true fixed point is at most `tol`.
pub fn stopping_threshold(tol: f64, rho: f64) -> f64 {
    tol * ((1.0 - rho) / rho).min(1.0)
}

/// `10 * ceil(log(tol (1 - rho) / (2 max|r|)) / log rho)`, at least 10.
pub fn default_max_iters(tol: f64, rho: f64, max_abs_reward: f64) -> usize {
    let arg = tol * (1.0 - rho) / (2.0 * max_abs_reward);
    if !(max_abs_reward > 0.0) || !(arg < 1.0) || !(rho > 0.0 && rho < 1.0) {
        return 10;
    }
    let sweeps = (arg.ln() / rho.ln()).ceil().max(1.0);
    (10.0 * sweeps) as usize
}

/// Iterates the chosen operator to its unique fixed point.
pub fn solve_fixed_point(
    kind: SolverKind,
    mdp: &TabularMdp,
    policy: &PolicyTable,
    init: Init,
    opts: &SolveOptions,
) -> Result<Solution, MetricError> {
    if !(opts.tol > 0.0 && opts.tol.is_finite()) {
        return Err(MetricError::Tolerance(opts.tol));
    }
    if let SolverKind::Weighted { c } = kind {
        if !(c > 0.0 && c < 1.0) {
            return Err(MetricError::CoefficientRange(c));
        }
    }
    check_policy(mdp, policy)?;

    let mut rho = kind.modulus(mdp.gamma());
    if kind.is_joint() && opts.sweep == SweepMode::Jacobi {
        rho = rho.sqrt();
    }
    let threshold = stopping_threshold(opts.tol, rho);
    let max_iters = opts
        .max_iters
        .unwrap_or_else(|| default_max_iters(opts.tol, rho, mdp.max_abs_reward()));

    let pair_update = |u: &StateMetric| match kind {
        SolverKind::Weighted { c } => apply_weighted_g(mdp, policy, u, c),
        _ => apply_revised_g(mdp, policy, u),
    };

    let (ns, nx) = (mdp.n_states(), mdp.n_pairs());
    let (mut u, mut g) = match init {
        Init::Zero => (StateMetric::zeros(ns), kind.is_joint().then(|| PairMetric::zeros(nx))),
        Init::Constant(k) => (
            StateMetric::constant(ns, k),
            kind.is_joint().then(|| PairMetric::constant(nx, k)),
        ),
        Init::Given { u, g } => {
            expect_dim("initial state metric", u.values.dim(), ns)?;
            let g = match (kind.is_joint(), g) {
                (false, _) => None,
                (true, Some(g)) => {
                    expect_dim("initial pair metric", g.values.dim(), nx)?;
                    Some(g)
                }
                (true, None) => Some(pair_update(&u)?),
            };
            (u, g)
        }
    };

    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let residual = match (&kind, g.as_mut()) {
            (SolverKind::Classic, _) => {
                let next = apply_classic_operator(mdp, policy, &u)?;
                let r = next.sup_distance(&u);
                u = next;
                r
            }
            (SolverKind::Mico, _) => {
                let next = apply_mico_operator(mdp, policy, &u)?;
                let r = next.sup_distance(&u);
                u = next;
                r
            }
            (_, Some(g)) => {
                let next_u = apply_revised_u(mdp, policy, g)?;
                let next_g = match opts.sweep {
                    SweepMode::GaussSeidel => pair_update(&next_u)?,
                    SweepMode::Jacobi => pair_update(&u)?,
                };
                let r = next_u.sup_distance(&u).max(next_g.sup_distance(g));
                u = next_u;
                *g = next_g;
                r
            }
            (_, None) => unreachable!("joint solves always carry a pair table"),
        };
        residuals.push(residual);
        if residual <= threshold {
            converged = true;
            break;
        }
    }

    let trace = SolveTrace {
        iterations: residuals.len(),
        final_residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        residuals,
        converged,
    };
    Ok(Solution { u, g, trace })
}
