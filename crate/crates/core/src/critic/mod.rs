//! The critic: generalized importance-sampling factor schemes, the exact
//! analytic layer (operators, fixed points, stability and bias bounds), and
//! the stochastic multi-step TD runtime those quantities oracle.

pub mod analytic;
pub mod factors;
pub mod runtime;

pub use analytic::{
    bias_bound, expected_update, generalized_bellman, pbe_fixed_point, pbe_system, q_fixed_point,
    stability_report, variance_param, BiasBound, GeneralizedBellman, PbeSystem, StabilityReport,
};
pub use factors::{FactorScheme, IsFactorTable};
pub use runtime::{td_run, theoretical_bound_curve, CriticConfig, CriticRun, Stepsize, CSV_HEADER};
