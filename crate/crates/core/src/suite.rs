//! Seeded random MDPs for property checks.

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mdp::{PolicyTable, TabularMdp};

/// Bounds for generated instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSpec {
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            max_states: 6,
            max_actions: 4,
            gamma_min: 0.5,
            gamma_max: 0.99,
        }
    }
}

/// A random distribution over `n` outcomes with a random support size.
fn sparse_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let k = rng.random_range(1..=n);
    let support = sample(rng, n, k);
    let mut w = vec![0.0; n];
    for i in support.iter() {
        // Strictly positive so the support size is exact.
        w[i] = rng.random_range(0.05..1.0);
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// One random instance: 2..=max_states states, 1..=max_actions actions,
/// sparse transitions, rewards in [-1, 1] and a random (sometimes
/// deterministic) policy.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, spec: &SuiteSpec) -> (TabularMdp, PolicyTable) {
    let ns = rng.random_range(2..=spec.max_states);
    let na = rng.random_range(1..=spec.max_actions);
    let gamma = rng.random_range(spec.gamma_min..=spec.gamma_max);

    let mut transition = Array3::zeros((ns, na, ns));
    for s in 0..ns {
        for a in 0..na {
            let row = sparse_distribution(rng, ns);
            for (t, p) in row.into_iter().enumerate() {
                transition[[s, a, t]] = p;
            }
        }
    }
    let reward = Array2::from_shape_fn((ns, na), |_| rng.random_range(-1.0..=1.0));
    let mdp = TabularMdp::new(transition, reward, gamma).expect("generated shapes are consistent");

    let policy = if rng.random_bool(0.2) {
        let actions: Vec<usize> = (0..ns).map(|_| rng.random_range(0..na)).collect();
        PolicyTable::deterministic(&actions, na)
    } else {
        let mut probs = Array2::zeros((ns, na));
        for s in 0..ns {
            for (a, p) in sparse_distribution(rng, na).into_iter().enumerate() {
                probs[[s, a]] = p;
            }
        }
        PolicyTable::new(probs).expect("generated policy is nonempty")
    };
    (mdp, policy)
}

/// The `index`-th instance of the suite for `seed`. Each instance has its
/// own stream, so instances can be generated independently.
pub fn suite_instance(seed: u64, index: u64, spec: &SuiteSpec) -> (TabularMdp, PolicyTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    random_instance(&mut rng, spec)
}

pub fn random_suite(seed: u64, count: usize) -> Vec<(TabularMdp, PolicyTable)> {
    let spec = SuiteSpec::default();
    (0..count as u64).map(|i| suite_instance(seed, i, &spec)).collect()
}

/// A random symmetric nonnegative table with entries in `[0, scale]`.
pub fn random_symmetric_table<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Array2<f64> {
    let mut t = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = rng.random_range(0.0..=scale);
            t[[i, j]] = v;
            t[[j, i]] = v;
        }
    }
    t
}
