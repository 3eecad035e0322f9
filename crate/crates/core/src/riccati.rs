//! Covariance flow `Ẋ = A X + X Aᵀ − X U X + B Bᵀ` under a piecewise-constant
//! control, and the cost functionals evaluated along it.
//!
//! Integration is classical fixed-step RK4. Each constant piece of the schedule
//! gets its own uniform sub-grid with an even number of steps, so no step
//! straddles a discontinuity and composite Simpson applies piecewise.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::csvout;
use crate::linalg::{sym_eigenvalues, symmetrize};
use crate::model::{GainSchedule, HorizonSpec, LtiSystem};

/// Relative eigenvalue floor below which a covariance counts as negative.
pub const NEGATIVITY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("covariance lost positivity at t = {t}: eigenvalue {min_eig:e} (step too large?)")]
    NegativeCovariance { t: f64, min_eig: f64 },
    #[error("schedule does not cover the horizon: {0}")]
    ScheduleGap(String),
    #[error("integration step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

/// Time-stamped covariance path plus cost components.
#[derive(Debug, Clone)]
pub struct RiccatiTrajectory {
    pub times: Vec<f64>,
    pub x: Vec<DMatrix<f64>>,
    /// Index into `times` where each schedule piece starts; piece `k` spans
    /// `segment_starts[k] ..= segment_starts[k + 1]`.
    pub segment_starts: Vec<usize>,
    pub controls: Vec<DMatrix<f64>>,
    /// `∫ Tr(X_t) dt`.
    pub mse_integral: f64,
    /// `½ ∫ Tr(U_t X_t) dt`, in nats.
    pub mi: f64,
    /// `mse_integral + 2 α mi`.
    pub cost: f64,
}

/// The three cost components of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostBreakdown {
    pub mse_integral: f64,
    pub mi: f64,
    pub cost: f64,
}

impl RiccatiTrajectory {
    pub fn costs(&self) -> CostBreakdown {
        CostBreakdown {
            mse_integral: self.mse_integral,
            mi: self.mi,
            cost: self.cost,
        }
    }

    /// Index of the schedule piece active at grid point `k` (right-continuous).
    pub fn segment_of(&self, k: usize) -> usize {
        let last = self.controls.len() - 1;
        self.segment_starts[1..=last]
            .iter()
            .position(|&s| k < s)
            .unwrap_or(last)
    }

    pub fn final_covariance(&self) -> &DMatrix<f64> {
        self.x.last().unwrap()
    }

    /// Writes `t, x_i_j (upper triangle, row-major), tr_x, tr_ux`.
    pub fn write_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let n = self.x[0].nrows();
        let mut w = csvout::writer(sink);
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            for j in i..n {
                header.push(format!("x_{i}_{j}"));
            }
        }
        header.push("tr_x".into());
        header.push("tr_ux".into());
        w.write_record(&header)?;
        for (k, (t, x)) in self.times.iter().zip(&self.x).enumerate() {
            let u = &self.controls[self.segment_of(k)];
            let mut row = vec![csvout::float(*t)];
            for i in 0..n {
                for j in i..n {
                    row.push(csvout::float(x[(i, j)]));
                }
            }
            row.push(csvout::float(x.trace()));
            row.push(csvout::float((u * x).trace()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of RK4 steps for a piece of length `len`: at least 2 and even.
pub fn steps_for(len: f64, dt: f64) -> usize {
    let raw = (len / dt - 1e-9).ceil().max(2.0) as usize;
    raw + raw % 2
}

fn simpson_weights(steps: usize) -> impl Iterator<Item = f64> {
    (0..=steps).map(move |i| {
        if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    })
}

struct Field<'a> {
    a: &'a DMatrix<f64>,
    bbt: DMatrix<f64>,
}

impl Field<'_> {
    fn eval(&self, x: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        let ax = self.a * x;
        &ax + ax.transpose() - x * u * x + &self.bbt
    }

    fn rk4(&self, x: &DMatrix<f64>, u: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        let k1 = self.eval(x, u);
        let k2 = self.eval(&(x + &k1 * (0.5 * h)), u);
        let k3 = self.eval(&(x + &k2 * (0.5 * h)), u);
        let k4 = self.eval(&(x + &k3 * h), u);
        symmetrize(&(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)))
    }
}

/// Right-hand side `A X + X Aᵀ − X U X + B Bᵀ`.
pub fn riccati_rhs(system: &LtiSystem, x: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    Field {
        a: system.a(),
        bbt: system.noise_covariance(),
    }
    .eval(x, u)
}

/// One RK4 step of size `h` under constant `u`, symmetrized.
pub fn rk4_step(system: &LtiSystem, x: &DMatrix<f64>, u: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    Field {
        a: system.a(),
        bbt: system.noise_covariance(),
    }
    .rk4(x, u, h)
}

fn check_positive(x: &DMatrix<f64>, t: f64) -> Result<(), RiccatiError> {
    let min_eig = if x.nrows() == 1 {
        x[(0, 0)]
    } else {
        sym_eigenvalues(x)[0]
    };
    if !min_eig.is_finite() || min_eig < -NEGATIVITY_TOL * x.norm().max(1.0) {
        return Err(RiccatiError::NegativeCovariance { t, min_eig });
    }
    Ok(())
}

/// Integrates the covariance flow over the horizon under `schedule`.
pub fn integrate_riccati(
    system: &LtiSystem,
    horizon: &HorizonSpec,
    schedule: &GainSchedule,
    dt: f64,
) -> Result<RiccatiTrajectory, RiccatiError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(RiccatiError::InvalidStep(dt));
    }
    schedule
        .check_covers(horizon, system.n())
        .map_err(|e| RiccatiError::ScheduleGap(e.to_string()))?;
    let field = Field {
        a: system.a(),
        bbt: system.noise_covariance(),
    };
    let mut times = vec![horizon.t0];
    let mut xs = vec![horizon.x0.clone()];
    let mut segment_starts = Vec::new();
    let mut mse = 0.0;
    let mut mi = 0.0;
    for (start, end, u) in schedule.segments() {
        segment_starts.push(times.len() - 1);
        let steps = steps_for(end - start, dt);
        let h = (end - start) / steps as f64;
        let first = xs.len() - 1;
        for i in 0..steps {
            let next = field.rk4(&xs[xs.len() - 1], u, h);
            let t = if i + 1 == steps { end } else { start + (i + 1) as f64 * h };
            check_positive(&next, t)?;
            times.push(t);
            xs.push(next);
        }
        let (mut seg_mse, mut seg_mi) = (0.0, 0.0);
        for (w, x) in simpson_weights(steps).zip(&xs[first..]) {
            seg_mse += w * x.trace();
            seg_mi += w * (u * x).trace();
        }
        mse += seg_mse * h / 3.0;
        mi += 0.5 * seg_mi * h / 3.0;
    }
    segment_starts.push(times.len() - 1);
    Ok(RiccatiTrajectory {
        times,
        x: xs,
        segment_starts,
        controls: schedule.values().to_vec(),
        mse_integral: mse,
        mi,
        cost: mse + 2.0 * horizon.alpha * mi,
    })
}

/// Cost components of the trajectory under `schedule`.
pub fn evaluate_cost(
    system: &LtiSystem,
    horizon: &HorizonSpec,
    schedule: &GainSchedule,
    dt: f64,
) -> Result<CostBreakdown, RiccatiError> {
    integrate_riccati(system, horizon, schedule, dt).map(|t| t.costs())
}

/// Allocation-free scalar kernel of the same scheme: `ẋ = 2 a x − u x² + b²`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarFlow {
    pub a: f64,
    pub b2: f64,
}

impl ScalarFlow {
    #[inline]
    fn rhs(&self, x: f64, u: f64) -> f64 {
        2.0 * self.a * x - u * x * x + self.b2
    }

    #[inline]
    pub fn rk4(&self, x: f64, u: f64, h: f64) -> f64 {
        let k1 = self.rhs(x, u);
        let k2 = self.rhs(x + 0.5 * h * k1, u);
        let k3 = self.rhs(x + 0.5 * h * k2, u);
        let k4 = self.rhs(x + h * k3, u);
        x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    }

    /// Integrates one constant piece with `steps` (even) RK4 steps of size `h`.
    /// Returns `(x_end, ∫ x dt)`, the integral by Simpson on the step grid.
    pub fn piece(&self, x0: f64, u: f64, h: f64, steps: usize) -> (f64, f64) {
        let mut x = x0;
        let mut acc = x0;
        for i in 1..=steps {
            x = self.rk4(x, u, h);
            let w = if i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * x;
        }
        (x, acc * h / 3.0)
    }
}
