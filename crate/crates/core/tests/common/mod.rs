#![allow(dead_code)]

use bisimlab::mdp::{tensor3, matrix};
use bisimlab::{PolicyTable, TabularMdp};
use ndarray::Array2;

pub struct Plain {
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
    pub gamma: f64,
}

pub fn plain(mdp: &TabularMdp, pi: &PolicyTable) -> Plain {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    Plain {
        transition: (0..ns)
            .map(|s| (0..na).map(|a| mdp.next_distribution(s, a).to_vec()).collect())
            .collect(),
        reward: mdp.reward().rows().into_iter().map(|r| r.to_vec()).collect(),
        policy: pi.probs().rows().into_iter().map(|r| r.to_vec()).collect(),
        gamma: mdp.gamma(),
    }
}

pub fn sup_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    a.indexed_iter().fold(0.0, |m, ((i, j), v)| f64::max(m, (v - b[i][j]).abs()))
}

/// Absorbing states with the given rewards, one action.
pub fn self_loops(rewards: &[f64], gamma: f64) -> (TabularMdp, PolicyTable) {
    let n = rewards.len();
    let t = (0..n)
        .map(|s| vec![(0..n).map(|t| f64::from(u8::from(s == t))).collect()])
        .collect();
    let r = rewards.iter().map(|&r| vec![r]).collect();
    let mdp = TabularMdp::new(tensor3(t).unwrap(), matrix(r, "reward").unwrap(), gamma).unwrap();
    (mdp, PolicyTable::uniform(n, 1))
}
