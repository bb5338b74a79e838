//! Numerical laboratory for multitype birth-and-death processes with
//! absorption at the origin: exact event-driven simulation, truncated
//! killed-generator spectral solves (quasi-stationary distribution,
//! extinction rate, eigenfunction), deterministic-limit integration,
//! Lyapunov drift certification, and lattice reversibility checks.

pub mod model;
pub mod ode;
pub mod poly;
pub mod sim;
pub mod spectral;
pub mod stats;

pub mod conditioned;
pub mod dense;
pub mod experiment;
pub mod lyapunov;
pub mod reversibility;

pub use model::{
    builtin_competition_model, builtin_logistic_model, check_hypotheses, eval_rates,
    find_fixed_point, AuditGrid, FixedPointResult, HypothesisReport, Model, ModelError, RateEval,
    RateField, Verdict,
};
pub use sim::{
    descent_time_experiment, four_domains_validation, hitting_time, simulate, HittingOutcome,
    SimError, State, Trajectory,
};
pub use spectral::{
    build_killed_generator, lambda0_scaling, mean_extinction_from_qsd, solve_qsd, BoundaryPolicy,
    KilledGenerator, QsdSolution,
};
