//! Tabular MDP solvers viewed as optimization algorithms.
//!
//! Value iteration is gradient descent on `v - T(v)`, policy iteration is
//! Newton's method, Q-learning is SGD on the sampled residual, and so on.
//! This crate implements both sides of those pairings, the safeguards that
//! make arbitrary update directions convergent, and a reproducible batch
//! harness for comparing them.

pub mod duality;
pub mod error;
pub mod fixtures;
pub mod harness;
mod linalg;
pub mod mdp;
pub mod model_based;
pub mod model_free;
pub mod problems;
pub mod record;
pub mod safeguards;
pub mod schedule;
pub mod verify;

pub use error::{Error, Result};
pub use mdp::{
    bellman_q_exact, bellman_q_sampled, bellman_v, exact_state_action_matrix, greedy_policy_q,
    greedy_policy_v, jacobian_t, policy_evaluation, policy_matrices, residual_inf,
    sampled_transition_matrix, smoothed_bellman_q, solve_optimal, solve_optimal_oracle,
    solve_optimal_pi, validate_mdp, NextStateSample, OptimalSolution, Policy, PolicyMatrices,
    QFunction, SmoothingKind, TabularMdp, ValueFunction,
};
pub use problems::{generate, sample_next_states, Family, GeneratorSpec, SeededStream};
pub use record::{IterRecord, RunTrace};
pub use schedule::Schedule;

/// Re-exported so callers can build vectors without depending on nalgebra.
pub use nalgebra::{DMatrix, DVector};
