//! Numerical toolkit for small-noise diffusions with locally weakly monotone,
//! possibly degenerate coefficients: sampled audits of the structural
//! conditions, Euler–Maruyama simulation, the controlled and skeleton
//! equations, minimum-action computation, and Monte Carlo checks of the
//! uniform large deviation principle.

// NaN must fail positivity checks, hence `!(x > 0.0)` throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action;
pub mod checker;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod model;
pub mod noise;
pub mod numfmt;
pub mod verify;

pub use action::{
    action_of_control, gradient_check, min_action_endpoint, path_rate, ActionResult, OptimizerOptions, Telemetry,
};
pub use checker::{CheckReport, Witness};
pub use dynamics::{simulate_controlled, simulate_sde, solve_skeleton, sup_distance, Scheme, Trajectory};
pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{CoefficientField, Control, HamiltonianNoise, LyapunovSpec, ModulusFunction};
