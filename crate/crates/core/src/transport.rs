//! Exact Wasserstein-1 distance between finite discrete distributions.
//!
//! The transportation problem is solved with the transportation simplex:
//! north-west-corner start, MODI potentials for reduced costs, Bland's rule
//! for the entering cell and pivoting along the unique cycle of the basis
//! tree. Supplies carry a symbolic perturbation (`a_i + eps`, last demand
//! `b_n + m eps`) compared lexicographically, so every basic solution is
//! nondegenerate and pivots are deterministic.

use std::cmp::Ordering;
use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::mdp::PROB_SUM_TOL;

/// Masses below this are treated as exact zeros during pivoting.
const MASS_SNAP: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("cost matrix is {found:?}, supports need {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("cost entry ({0}, {1}) is negative or not finite")]
    InvalidCost(usize, usize),
    #[error("simplex did not terminate within {0} pivots")]
    PivotLimit(usize),
}

/// Probability weights over a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self, TransportError> {
        if weights.is_empty() {
            return Err(TransportError::InvalidDistribution("empty support".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(TransportError::InvalidDistribution(format!(
                "weight {i} is {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(TransportError::InvalidDistribution(format!(
                "weights sum to {total}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn point_mass(len: usize, at: usize) -> Self {
        let mut weights = vec![0.0; len];
        weights[at] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// An optimal coupling together with a dual certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub value: f64,
    pub coupling: Array2<f64>,
    /// Dual potentials: `u_i + v_j <= cost[i][j]` everywhere, with equality
    /// on the support of the coupling.
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
}

impl TransportPlan {
    /// `sum_i mu_i u_i + sum_j nu_j v_j`; equals `value` at optimality.
    pub fn dual_value(&self, mu: &DiscreteDistribution, nu: &DiscreteDistribution) -> f64 {
        let rows: f64 = mu.weights.iter().zip(&self.row_potentials).map(|(a, u)| a * u).sum();
        let cols: f64 = nu.weights.iter().zip(&self.col_potentials).map(|(b, v)| b * v).sum();
        rows + cols
    }

    /// Largest violation of `u_i + v_j <= cost[i][j]`.
    pub fn dual_infeasibility(&self, cost: ArrayView2<'_, f64>) -> f64 {
        let mut worst = 0.0_f64;
        for ((i, j), &c) in cost.indexed_iter() {
            worst = worst.max(self.row_potentials[i] + self.col_potentials[j] - c);
        }
        worst
    }
}

/// Minimum-cost coupling of `mu` and `nu` under `cost`.
pub fn wasserstein1(
    mu: &DiscreteDistribution,
    nu: &DiscreteDistribution,
    cost: ArrayView2<'_, f64>,
) -> Result<TransportPlan, TransportError> {
    let (m_full, n_full) = (mu.len(), nu.len());
    if cost.dim() != (m_full, n_full) {
        return Err(TransportError::DimensionMismatch {
            expected: (m_full, n_full),
            found: cost.dim(),
        });
    }
    if let Some(((i, j), _)) = cost.indexed_iter().find(|(_, c)| !c.is_finite() || **c < 0.0) {
        return Err(TransportError::InvalidCost(i, j));
    }

    // Zero-weight atoms are dropped and later reinserted as zero rows/columns.
    let rows: Vec<usize> = (0..m_full).filter(|&i| mu.weights[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n_full).filter(|&j| nu.weights[j] > 0.0).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| mu.weights[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| nu.weights[j]).collect();
    let reduced_cost = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| cost[[rows[i], cols[j]]]);

    let solved = Simplex::new(&supply, &demand, reduced_cost.view()).solve()?;

    let mut coupling = Array2::zeros((m_full, n_full));
    for (&(i, j), flow) in solved.basis.iter().zip(&solved.flows) {
        coupling[[rows[i], cols[j]]] = flow.val.max(0.0);
    }
    let value = coupling.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();

    // Extend the potentials to dropped atoms so dual feasibility holds on
    // the full cost matrix.
    let mut u = vec![f64::NAN; m_full];
    let mut v = vec![f64::NAN; n_full];
    for (k, &i) in rows.iter().enumerate() {
        u[i] = solved.u[k];
    }
    for (k, &j) in cols.iter().enumerate() {
        v[j] = solved.v[k];
    }
    for i in (0..m_full).filter(|i| mu.weights[*i] <= 0.0) {
        u[i] = cols
            .iter()
            .map(|&j| cost[[i, j]] - v[j])
            .fold(f64::INFINITY, f64::min);
    }
    for j in (0..n_full).filter(|j| nu.weights[*j] <= 0.0) {
        v[j] = (0..m_full)
            .map(|i| cost[[i, j]] - u[i])
            .fold(f64::INFINITY, f64::min);
    }

    Ok(TransportPlan {
        value,
        coupling,
        row_potentials: u,
        col_potentials: v,
    })
}

/// A mass `val + eps * (infinitesimal)`, ordered lexicographically.
#[derive(Debug, Clone, Copy)]
struct Lex {
    val: f64,
    eps: i64,
}

impl Lex {
    const ZERO: Lex = Lex { val: 0.0, eps: 0 };

    fn snapped(val: f64, eps: i64) -> Self {
        let val = if val.abs() < MASS_SNAP { 0.0 } else { val };
        Self { val, eps }
    }

    fn add(self, o: Lex) -> Lex {
        Lex::snapped(self.val + o.val, self.eps + o.eps)
    }

    fn sub(self, o: Lex) -> Lex {
        Lex::snapped(self.val - o.val, self.eps - o.eps)
    }

    fn cmp(self, o: Lex) -> Ordering {
        if (self.val - o.val).abs() <= MASS_SNAP {
            self.eps.cmp(&o.eps)
        } else if self.val < o.val {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    }

    fn is_zero(self) -> bool {
        self.cmp(Lex::ZERO) == Ordering::Equal
    }
}

struct Simplex<'a> {
    m: usize,
    n: usize,
    cost: ArrayView2<'a, f64>,
    basis: Vec<(usize, usize)>,
    flows: Vec<Lex>,
}

struct Solved {
    basis: Vec<(usize, usize)>,
    flows: Vec<Lex>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl<'a> Simplex<'a> {
    /// North-west-corner start on the perturbed problem. The staircase path
    /// always yields exactly `m + n - 1` cells forming a spanning tree.
    fn new(supply: &[f64], demand: &[f64], cost: ArrayView2<'a, f64>) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let mut rem_a: Vec<Lex> = supply.iter().map(|&a| Lex { val: a, eps: 1 }).collect();
        let mut rem_b: Vec<Lex> = demand.iter().map(|&b| Lex { val: b, eps: 0 }).collect();
        rem_b[n - 1].eps = m as i64;

        let mut basis = Vec::with_capacity(m + n - 1);
        let mut flows = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = match rem_a[i].cmp(rem_b[j]) {
                Ordering::Greater => rem_b[j],
                _ => rem_a[i],
            };
            basis.push((i, j));
            flows.push(x);
            rem_a[i] = rem_a[i].sub(x);
            rem_b[j] = rem_b[j].sub(x);
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (rem_a[i].is_zero() && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            m,
            n,
            cost,
            basis,
            flows,
        }
    }

    fn solve(mut self) -> Result<Solved, TransportError> {
        let max_c = self.cost.iter().fold(1.0_f64, |a, &c| a.max(c));
        let tol = 1e-12 * max_c;
        let limit = 50 * (self.m + self.n) * self.m * self.n + 100;

        for _ in 0..limit {
            let (u, v) = self.potentials();
            let Some(entering) = self.entering(&u, &v, tol) else {
                return Ok(Solved {
                    basis: self.basis,
                    flows: self.flows,
                    u,
                    v,
                });
            };
            self.pivot(entering);
        }
        Err(TransportError::PivotLimit(limit))
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push(k);
            adj[self.m + j].push(k);
        }
        adj
    }

    /// Solves `u_i + v_j = c_ij` on the basis tree with `u_0 = 0`.
    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut u = vec![f64::NAN; self.m];
        let mut v = vec![f64::NAN; self.n];
        u[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &k in &adj[node] {
                let (i, j) = self.basis[k];
                let c = self.cost[[i, j]];
                if node < self.m {
                    if v[j].is_nan() {
                        v[j] = c - u[i];
                        queue.push_back(self.m + j);
                    }
                } else if u[i].is_nan() {
                    u[i] = c - v[j];
                    queue.push_back(i);
                }
            }
        }
        (u, v)
    }

    /// Bland's rule: the first nonbasic cell in row-major order with a
    /// negative reduced cost.
    fn entering(&self, u: &[f64], v: &[f64], tol: f64) -> Option<(usize, usize)> {
        let mut is_basic = vec![false; self.m * self.n];
        for &(i, j) in &self.basis {
            is_basic[i * self.n + j] = true;
        }
        (0..self.m)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .find(|&(i, j)| !is_basic[i * self.n + j] && self.cost[[i, j]] - u[i] - v[j] < -tol)
    }

    /// Basis cells on the tree path from column `j` back to row `i`.
    fn tree_path(&self, i: usize, j: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let start = self.m + j;
        let mut parent_edge = vec![usize::MAX; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &k in &adj[node] {
                let (ri, cj) = self.basis[k];
                let other = if node < self.m { self.m + cj } else { ri };
                if !seen[other] {
                    seen[other] = true;
                    parent_edge[other] = k;
                    queue.push_back(other);
                }
            }
        }
        // Walk back from row i to column j, then reverse.
        let mut path = Vec::new();
        let mut node = i;
        while node != start {
            let k = parent_edge[node];
            path.push(k);
            let (ri, cj) = self.basis[k];
            node = if node < self.m { self.m + cj } else { ri };
        }
        path.reverse();
        path
    }

    fn pivot(&mut self, (i, j): (usize, usize)) {
        let path = self.tree_path(i, j);
        // Alternating signs along the cycle: entering +, then -, +, ...
        let minus: Vec<usize> = path.iter().copied().step_by(2).collect();
        let leave = *minus
            .iter()
            .min_by(|&&a, &&b| {
                self.flows[a]
                    .cmp(self.flows[b])
                    .then_with(|| self.basis[a].cmp(&self.basis[b]))
            })
            .expect("cycle has a decreasing cell");
        let theta = self.flows[leave];

        for (pos, &k) in path.iter().enumerate() {
            self.flows[k] = if pos % 2 == 0 {
                self.flows[k].sub(theta)
            } else {
                self.flows[k].add(theta)
            };
        }
        self.basis[leave] = (i, j);
        self.flows[leave] = theta;
    }
}
