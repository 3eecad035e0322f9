//! Exact finite-horizon gain control for a scalar source `dx = a x dt + dw`.
//!
//! The problem falls into one of three cases depending on where `α` lies
//! relative to two thresholds in `(a, γ)`. Each case has a handful of
//! subcases; the optimal control is piecewise constant with values in
//! `{0, u⋆, γ}` and at most two switches.

pub mod closed_form;
mod oracle;
mod roots;
mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HorizonSpec, LtiSystem};

pub use closed_form::{region1_solution, region3_state, region3_state_exponential, Piece};
pub use oracle::{brute_force_oracle, OracleResult};
pub use roots::{find_roots, refine, Root, RESIDUAL_TOL, SAMPLES};
pub use solver::{
    phase_field, solve_scalar, write_phase_field_csv, Level, PhaseSample, ScalarSolution, Segment, Subcase,
    TrajectorySample,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalarError {
    #[error("invalid scalar problem: {0}")]
    InvalidProblem(String),
    #[error("no subcase produced a consistent solution: {0}")]
    NoSubcaseMatch(String),
    #[error("switch-time equation could not be bracketed: {0}")]
    RootBracketFailure(String),
}

/// Scalar problem with unit noise intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarProblem {
    pub a: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub x0: f64,
    pub t0: f64,
    pub t1: f64,
}

impl ScalarProblem {
    pub fn new(a: f64, alpha: f64, gamma: f64, x0: f64, t0: f64, t1: f64) -> Result<Self, ScalarError> {
        let bad = |m: String| Err(ScalarError::InvalidProblem(m));
        if !(a < 0.0 && a.is_finite()) {
            return bad(format!("a must be negative, got {a}"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {alpha}"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {gamma}"));
        }
        if !(x0 >= 0.0 && x0.is_finite()) {
            return bad(format!("x0 must be nonnegative, got {x0}"));
        }
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return bad(format!("need t0 < t1, got [{t0}, {t1}]"));
        }
        Ok(Self {
            a,
            alpha,
            gamma,
            x0,
            t0,
            t1,
        })
    }

    /// Scalar view of a validated system; requires `n = 1` and `b² = 1`.
    pub fn from_model(system: &LtiSystem, horizon: &HorizonSpec) -> Result<Self, ScalarError> {
        if system.n() != 1 {
            return Err(ScalarError::InvalidProblem(format!(
                "scalar solver needs n = 1, got n = {}",
                system.n()
            )));
        }
        let b2 = system.noise_covariance()[(0, 0)];
        if (b2 - 1.0).abs() > 1e-12 {
            return Err(ScalarError::InvalidProblem(format!("scalar solver needs B = 1, got B² = {b2}")));
        }
        Self::new(
            system.a()[(0, 0)],
            horizon.alpha,
            horizon.gamma,
            horizon.x0[(0, 0)],
            horizon.t0,
            horizon.t1,
        )
    }

    pub fn system(&self) -> LtiSystem {
        LtiSystem::scalar(self.a).expect("a < 0 is validated")
    }

    pub fn horizon(&self) -> HorizonSpec {
        HorizonSpec::new(
            self.t0,
            self.t1,
            nalgebra::DMatrix::from_element(1, 1, self.x0),
            self.alpha,
            self.gamma,
        )
        .expect("fields are validated")
    }

    /// Interior control of the singular arc, `2a/√α + 1/α`.
    pub fn u_star(&self) -> f64 {
        2.0 * self.a / self.alpha.sqrt() + 1.0 / self.alpha
    }

    /// `x_K = 2aα + 2√α`: where a `u = 0` arc leaving `(√α, √α)` ends at `p = 0`.
    pub fn x_k(&self) -> f64 {
        2.0 * self.a * self.alpha + 2.0 * self.alpha.sqrt()
    }

    /// `t''`, the time a `u = 0` arc must leave `(√α, √α)` to reach `p = 0` at `t1`.
    ///
    /// Infinite in the past when `2a√α + 1 ≤ 0`.
    pub fn t_double_prime(&self) -> f64 {
        let arg = (2.0 * self.a * self.alpha.sqrt() + 1.0).max(0.0);
        self.t1 - arg.ln() / (2.0 * self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseLabel {
    pub label: Case,
    pub threshold_low: f64,
    pub threshold_high: f64,
}

/// `((a + √(a² + γ))²/γ², 1/(4a²))`.
pub fn thresholds(a: f64, gamma: f64) -> (f64, f64) {
    let c = (a * a + gamma).sqrt();
    // a + c = γ/(c − a)
    let low = 1.0 / ((c - a) * (c - a));
    (low, 1.0 / (4.0 * a * a))
}

/// Case A above the high threshold, C below the low one, B in between (inclusive).
pub fn classify_case(problem: &ScalarProblem) -> CaseLabel {
    let (low, high) = thresholds(problem.a, problem.gamma);
    let label = if problem.alpha > high {
        Case::A
    } else if problem.alpha < low {
        Case::C
    } else {
        Case::B
    };
    CaseLabel {
        label,
        threshold_low: low,
        threshold_high: high,
    }
}

/// Stationary point of the state/costate phase portrait.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub x: f64,
    pub p: f64,
    pub u: f64,
}

pub fn stationary_point(problem: &ScalarProblem) -> StationaryPoint {
    let ScalarProblem { a, alpha, gamma, .. } = *problem;
    match classify_case(problem).label {
        Case::A => StationaryPoint {
            x: -0.5 / a,
            p: -0.5 / a,
            u: 0.0,
        },
        Case::B => StationaryPoint {
            x: alpha.sqrt(),
            p: alpha.sqrt(),
            u: problem.u_star(),
        },
        Case::C => {
            let c = (a * a + gamma).sqrt();
            StationaryPoint {
                x: 1.0 / (c - a),
                p: (1.0 + alpha * gamma) / (2.0 * c),
                u: gamma,
            }
        }
    }
}
