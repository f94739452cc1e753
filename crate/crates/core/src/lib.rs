//! Bisimulation metrics on finite MDPs.
//!
//! * [`mdp`]: tabular MDPs, policies, exact policy evaluation and sampling.
//! * [`transport`]: exact Wasserstein-1 via the transportation simplex.
//! * [`metric`]: classic, MICo-style, revised and weighted operators and a
//!   fixed-point solver.
//! * [`analysis`]: value/Q bound checks, reward-gap tables, the three-state
//!   toy example and state aggregation.
//! * [`representation`]: learned embeddings trained toward the weighted
//!   operator with an adaptive coefficient.
//! * [`suite`]: seeded random MDPs for property checks.

pub mod analysis;
pub mod mdp;
pub mod metric;
pub mod representation;
pub mod suite;
pub mod transport;

pub use mdp::{PolicyTable, TabularMdp};
pub use metric::{PairMetric, SolverKind, StateMetric};
