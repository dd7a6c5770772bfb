//! Desk-scale laboratory for policy-based reinforcement learning under
//! off-policy sampling and linear function approximation.
//!
//! The crate is organized around an exact/stochastic split:
//!
//! * [`mdp`] and [`chain`] hold the finite-MDP model, exact Bellman
//!   machinery, behavior-chain analysis, and trajectory sampling.
//! * [`features`] is the linear value class: the feature matrix, the
//!   `K_SA`-weighted geometry, and projection onto the feature span.
//! * [`critic`] implements the generic multi-step off-policy TD critic with
//!   generalized importance-sampling factors (lambda-averaged and two-sided
//!   Q-trace), plus the analytic layer that computes its fixed points,
//!   contraction factors, and finite-sample bound curves exactly.
//! * [`actor`] implements the policy-improvement rules (natural policy
//!   gradient, Boltzmann softmax, epsilon-greedy) with the constant and
//!   geometrically increasing stepsize schedules, and actor-side bounds.
//! * [`pipeline`] wires actor and critic into the end-to-end off-policy
//!   actor-critic loop and its bound report.
//!
//! Everything analytic is a pure function of its inputs; everything
//! stochastic takes an explicit seed. Exact quantities double as test
//! oracles for the sampled paths.

pub mod actor;
pub mod chain;
pub mod critic;
pub mod error;
pub mod features;
pub mod mdp;
pub mod pipeline;

#[cfg(test)]
pub(crate) mod testkit;

pub use chain::{sample_trajectory, stationary_distribution, MixingInfo, StartState};
pub use error::{Error, Result};
pub use features::{project, spectral_info, weighted_norm, FeatureMap, WeightMatrixInfo};
pub use mdp::{
    bellman_optimality, bellman_policy, exact_q, gen_garnet, value_iteration, Mdp, Policy, QTable,
};
