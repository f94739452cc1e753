//! Slow, independent reference computations used only by tests.
//!
//! Everything here works on plain nested vectors and solves problems by
//! brute force or dense linear algebra, so it shares no code path with the
//! iterative solvers it checks.

use nalgebra::{DMatrix, DVector};

/// Minimum transport cost by enumerating every basic feasible solution of
/// the transportation polytope. Exponential; intended for supports of size
/// at most 4 or so.
pub fn transport_vertex_min(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let k = m + n - 1;
    let mut best = f64::INFINITY;
    for subset in combinations(cells.len(), k) {
        // Row constraints, then all column constraints but the last (the
        // dropped one is implied by total mass).
        let mut lhs = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for (col, &c) in subset.iter().enumerate() {
            let (i, j) = cells[c];
            lhs[(i, col)] = 1.0;
            if j < n - 1 {
                lhs[(m + j, col)] = 1.0;
            }
        }
        for i in 0..m {
            rhs[i] = a[i];
        }
        for j in 0..n - 1 {
            rhs[m + j] = b[j];
        }
        let lu = lhs.lu();
        let Some(x) = lu.solve(&rhs) else { continue };
        if lu.determinant().abs() < 1e-9 {
            continue;
        }
        if x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let last_col: f64 = subset
            .iter()
            .zip(x.iter())
            .filter(|(c, _)| cells[**c].1 == n - 1)
            .map(|(_, v)| v)
            .sum();
        if (last_col - b[n - 1]).abs() > 1e-9 {
            continue;
        }
        let value: f64 = subset
            .iter()
            .zip(x.iter())
            .map(|(&c, &v)| cost[cells[c].0][cells[c].1] * v.max(0.0))
            .sum();
        best = best.min(value);
    }
    best
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            if n - i < k - current.len() {
                break;
            }
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// Solves `(I - gamma P) v = r` densely.
pub fn dense_policy_values(p_pi: &[Vec<f64>], r_pi: &[f64], gamma: f64) -> Vec<f64> {
    let n = r_pi.len();
    let lhs = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - gamma * p_pi[i][j]);
    let rhs = DVector::from_column_slice(r_pi);
    lhs.lu().solve(&rhs).expect("I - gamma P is invertible").iter().copied().collect()
}

/// Policy-averaged rewards and transitions computed with explicit loops.
pub fn marginals(
    transition: &[Vec<Vec<f64>>],
    reward: &[Vec<f64>],
    policy: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let ns = reward.len();
    let mut r = vec![0.0; ns];
    let mut p = vec![vec![0.0; ns]; ns];
    for s in 0..ns {
        for (a, &pa) in policy[s].iter().enumerate() {
            r[s] += pa * reward[s][a];
            for t in 0..ns {
                p[s][t] += pa * transition[s][a][t];
            }
        }
    }
    (r, p)
}

/// Solves `(I - gamma P kron P) vec(U) = vec(rhs)` for a square table `U`.
fn kron_solve(p: &[Vec<f64>], rhs: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let n = p.len();
    let dim = n * n;
    let lhs = DMatrix::from_fn(dim, dim, |row, col| {
        let (i, j) = (row / n, row % n);
        let (k, l) = (col / n, col % n);
        f64::from(u8::from(row == col)) - gamma * p[i][k] * p[j][l]
    });
    let b = DVector::from_fn(dim, |row, _| rhs[row / n][row % n]);
    let x = lhs.lu().solve(&b).expect("contraction system is invertible");
    (0..n).map(|i| (0..n).map(|j| x[i * n + j]).collect()).collect()
}

/// Exact joint fixed point `(U, G)` of the revised operators.
///
/// Eliminating `G` gives `U = D1 + gamma P U P^T` with `D1` the expected
/// absolute reward gap under independent action draws; that linear system
/// is solved densely and `G` recovered from `U`. With `weight = Some(c)` the
/// weighted system `G = (1-c)|dr| + c P U P^T` is solved instead.
pub fn revised_fixed_point(
    transition: &[Vec<Vec<f64>>],
    reward: &[Vec<f64>],
    policy: &[Vec<f64>],
    gamma: f64,
    weight: Option<f64>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ns = reward.len();
    let na = reward[0].len();
    let (reward_scale, next_scale) = match weight {
        Some(c) => (1.0 - c, c),
        None => (1.0, gamma),
    };
    let (_, p) = marginals(transition, reward, policy);
    let mut d1 = vec![vec![0.0; ns]; ns];
    for si in 0..ns {
        for sj in 0..ns {
            for ai in 0..na {
                for aj in 0..na {
                    d1[si][sj] += policy[si][ai]
                        * policy[sj][aj]
                        * reward_scale
                        * (reward[si][ai] - reward[sj][aj]).abs();
                }
            }
        }
    }
    let u = kron_solve(&p, &d1, next_scale);

    let nx = ns * na;
    let mut g = vec![vec![0.0; nx]; nx];
    for x in 0..nx {
        for y in 0..nx {
            let (si, ai) = (x / na, x % na);
            let (sj, aj) = (y / na, y % na);
            let mut next = 0.0;
            for k in 0..ns {
                for l in 0..ns {
                    next += transition[si][ai][k] * transition[sj][aj][l] * u[k][l];
                }
            }
            g[x][y] = reward_scale * (reward[si][ai] - reward[sj][aj]).abs() + next_scale * next;
        }
    }
    (u, g)
}

/// Exact fixed point of `u = |r_i - r_j| + gamma P u P^T` (marginal rewards).
pub fn mico_fixed_point(
    transition: &[Vec<Vec<f64>>],
    reward: &[Vec<f64>],
    policy: &[Vec<f64>],
    gamma: f64,
) -> Vec<Vec<f64>> {
    let (r, p) = marginals(transition, reward, policy);
    let gaps: Vec<Vec<f64>> = r.iter().map(|ri| r.iter().map(|rj| (ri - rj).abs()).collect()).collect();
    kron_solve(&p, &gaps, gamma)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let plus = f(&probe);
            probe[k] = x[k] - h;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertex_oracle_on_small_problems() {
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(transport_vertex_min(&[0.5, 0.5], &[0.5, 0.5], &c), 0.0);
        assert!((transport_vertex_min(&[1.0, 0.0], &[0.0, 1.0], &c) - 1.0).abs() < 1e-12);
        let c3 = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]];
        // Shift half a unit of mass one step right.
        let v = transport_vertex_min(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5], &c3);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_values_geometric() {
        let v = dense_policy_values(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 1.0], 0.9);
        assert!(v[0].abs() < 1e-12 && (v[1] - 10.0).abs() < 1e-10);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
