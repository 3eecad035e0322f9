//! Channel-gain control for minimum-information Kalman-Bucy filtering.
//!
//! A linear source `dx = A x dt + B dw` is observed through the channel
//! `dy = C_t x dt + dv`. Choosing the gain `C_t` trades the filter's
//! mean-square error against the mutual information between the source and
//! its estimate. This crate provides:
//!
//! * [`model`]: problem data and validation.
//! * [`linalg`]: symmetric eigen-solves, Lyapunov and algebraic Riccati solvers.
//! * [`riccati`]: the covariance flow under a gain schedule and its cost.
//! * [`simulate`]: Monte-Carlo check of the MSE identity.
//! * [`pmp`]: minimum-principle residual certificates.
//! * [`scalar`]: exact finite-horizon optimal gains for scalar sources.
//! * [`stationary`]: optimal time-invariant gains through an SDP relaxation.

pub mod linalg;
pub mod model;
pub mod pmp;
pub mod riccati;
pub mod scalar;
pub mod simulate;
pub mod stationary;

mod csvout;

pub use model::{GainSchedule, HorizonSpec, LtiSystem, ModelError, ProblemSpec};
pub use nalgebra::DMatrix;
