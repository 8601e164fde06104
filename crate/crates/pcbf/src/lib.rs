//! Predictive control barrier functions for layered control systems.
//!
//! A safety constraint `h(z) >= 0` is written on a reduced-order model (RoM)
//! whose commands are tracked by a full-order model (FoM) through a low-level
//! controller. Tracking error can break safety of the FoM even when the RoM
//! filter is correct, so the RoM CBF condition is buffered by a robustness
//! term `delta(x)` computed from forward rollouts of the closed-loop FoM.
//!
//! The crate provides:
//!
//! - [`dynamics`]: control-affine models, the layered RoM/FoM coupling, and
//!   fixed-step RK4 integration of closed-loop trajectories
//! - [`barrier`]: barrier functions, Lie derivatives, and the closed-form
//!   minimum-deviation safety filter with an optional buffer
//! - [`predictor`]: rollout-based buffer optimization, real-time single-step
//!   iterations, and parallel grid tabulation
//! - [`learner`]: episodic collection of filtered rollouts and check-loss
//!   (quantile) regression of a small network `delta_theta(x)`
//! - [`certificates`]: numerical estimation of tracking-function constants
//!   and verification of the barrier conditions along trajectories

// Validation deliberately writes `!(x > 0.0)` so NaN configs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod barrier;
pub mod certificates;
pub mod dynamics;
pub mod error;
pub mod learner;
pub mod predictor;
pub(crate) mod util;

pub use error::{Error, Result};
