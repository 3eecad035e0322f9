//! Problem data: the source/channel model, the horizon, and gain schedules.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, symmetrize};

/// Stability margin: every eigenvalue of `A` must satisfy `Re λ < -HURWITZ_MARGIN`.
pub const HURWITZ_MARGIN: f64 = 1e-9;

/// Relative rank tolerance for `B`: `σ_min(B) > RANK_TOL · max(1, σ_max(B))`.
pub const RANK_TOL: f64 = 1e-12;

/// Relative PSD tolerance for covariances and schedule values.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("A is not Hurwitz: max Re(λ) = {max_real:e}")]
    NotHurwitz { max_real: f64 },
    #[error("B is singular: σ_min = {sigma_min:e}")]
    SingularB { sigma_min: f64 },
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error("{what} is not symmetric PSD: min eigenvalue {min_eig:e}")]
    NotPsd { what: &'static str, min_eig: f64 },
    #[error("{what} is not symmetric (asymmetry {asym:e})")]
    NotSymmetric { what: &'static str, asym: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule value {index} exceeds the gain bound: λ_max = {max_eig} > γ = {gamma}")]
    GainBound {
        index: usize,
        max_eig: f64,
        gamma: f64,
    },
    #[error("malformed matrix: {0}")]
    MalformedMatrix(String),
}

/// Validated linear source model `dx = A x dt + B dw`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// `B Bᵀ`, symmetrized.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        symmetrize(&(&self.b * self.b.transpose()))
    }

    /// Largest real part among the eigenvalues of `A`.
    pub fn spectral_abscissa(&self) -> f64 {
        spectral_abscissa(&self.a)
    }

    /// Scalar system `a`, `b = 1`.
    pub fn scalar(a: f64) -> Result<Self, ModelError> {
        validate_system(DMatrix::from_element(1, 1, a), DMatrix::identity(1, 1))
    }
}

fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Checks that `A` is Hurwitz and `B` nonsingular.
pub fn validate_system(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<LtiSystem, ModelError> {
    if !a.is_square() || !b.is_square() || a.nrows() != b.nrows() || a.nrows() == 0 {
        return Err(ModelError::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::MalformedMatrix("non-finite entry in A or B".into()));
    }
    let max_real = spectral_abscissa(&a);
    if max_real >= -HURWITZ_MARGIN {
        return Err(ModelError::NotHurwitz { max_real });
    }
    let sv = b.singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    if sigma_min <= RANK_TOL * sigma_max.max(1.0) {
        return Err(ModelError::SingularB { sigma_min });
    }
    Ok(LtiSystem { a, b })
}

/// `U = CᵀC`, exactly symmetric.
pub fn gain_to_u(c: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>, ModelError> {
    if c.ncols() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "gain has {} columns, state dimension is {n}",
            c.ncols()
        )));
    }
    Ok(symmetrize(&(c.transpose() * c)))
}

fn psd_tolerance(m: &DMatrix<f64>) -> f64 {
    PSD_TOL * m.norm().max(1.0)
}

fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<(), ModelError> {
    let asym = (m - m.transpose()).norm();
    if asym > psd_tolerance(m) {
        return Err(ModelError::NotSymmetric { what, asym });
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>, what: &'static str) -> Result<(), ModelError> {
    check_symmetric(m, what)?;
    let min_eig = linalg::sym_eig(m).eigenvalues[0];
    if min_eig < -psd_tolerance(m) {
        return Err(ModelError::NotPsd { what, min_eig });
    }
    Ok(())
}

/// Horizon `[t0, t1]`, initial covariance and trade-off parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSpec {
    pub t0: f64,
    pub t1: f64,
    pub x0: DMatrix<f64>,
    pub alpha: f64,
    pub gamma: f64,
}

impl HorizonSpec {
    pub fn new(
        t0: f64,
        t1: f64,
        x0: DMatrix<f64>,
        alpha: f64,
        gamma: f64,
    ) -> Result<Self, ModelError> {
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(ModelError::InvalidHorizon(format!("need t0 < t1, got [{t0}, {t1}]")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ModelError::InvalidHorizon(format!("alpha must be > 0, got {alpha}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(ModelError::InvalidHorizon(format!("gamma must be > 0, got {gamma}")));
        }
        if !x0.is_square() {
            return Err(ModelError::DimensionMismatch("X0 must be square".into()));
        }
        check_psd(&x0, "X0")?;
        Ok(Self {
            t0,
            t1,
            x0: symmetrize(&x0),
            alpha,
            gamma,
        })
    }

    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Default integration step, `(t1 - t0) / 4096`.
    pub fn default_dt(&self) -> f64 {
        self.duration() / 4096.0
    }
}

/// Piecewise-constant control `U_t = C_tᵀ C_t` on `[t0, t1]`.
///
/// `values[k]` applies on `[breakpoints[k], breakpoints[k + 1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    breakpoints: Vec<f64>,
    values: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn new(
        breakpoints: Vec<f64>,
        values: Vec<DMatrix<f64>>,
        gamma: f64,
    ) -> Result<Self, ModelError> {
        if breakpoints.len() < 2 || values.len() + 1 != breakpoints.len() {
            return Err(ModelError::InvalidSchedule(format!(
                "{} breakpoints for {} values",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) || breakpoints.iter().any(|t| !t.is_finite())
        {
            return Err(ModelError::InvalidSchedule(
                "breakpoints must be finite and strictly increasing".into(),
            ));
        }
        let n = values[0].nrows();
        let mut sym = Vec::with_capacity(values.len());
        for (index, v) in values.iter().enumerate() {
            if !v.is_square() || v.nrows() != n {
                return Err(ModelError::DimensionMismatch(format!(
                    "schedule value {index} is {}x{}",
                    v.nrows(),
                    v.ncols()
                )));
            }
            check_psd(v, "schedule value")?;
            let v = symmetrize(v);
            let max_eig = *linalg::sym_eig(&v).eigenvalues.last().unwrap();
            if max_eig > gamma + psd_tolerance(&v).max(PSD_TOL * gamma) {
                return Err(ModelError::GainBound {
                    index,
                    max_eig,
                    gamma,
                });
            }
            sym.push(v);
        }
        Ok(Self {
            breakpoints,
            values: sym,
        })
    }

    /// Schedule built from gains `C_k` rather than `U_k`.
    pub fn from_gains(
        breakpoints: Vec<f64>,
        gains: &[DMatrix<f64>],
        gamma: f64,
    ) -> Result<Self, ModelError> {
        let n = gains.first().map(|c| c.ncols()).unwrap_or(0);
        let values = gains
            .iter()
            .map(|c| gain_to_u(c, n))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(breakpoints, values, gamma)
    }

    pub fn constant(t0: f64, t1: f64, u: DMatrix<f64>, gamma: f64) -> Result<Self, ModelError> {
        Self::new(vec![t0, t1], vec![u], gamma)
    }

    /// Scalar schedule from breakpoints and control levels.
    pub fn scalar(breakpoints: Vec<f64>, levels: &[f64], gamma: f64) -> Result<Self, ModelError> {
        let values = levels
            .iter()
            .map(|&u| DMatrix::from_element(1, 1, u))
            .collect();
        Self::new(breakpoints, values, gamma)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    /// `(start, end, U)` for each constant piece.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, &DMatrix<f64>)> + '_ {
        self.breakpoints
            .windows(2)
            .zip(&self.values)
            .map(|(w, u)| (w[0], w[1], u))
    }

    /// Right-continuous value at `t` (the last piece at `t = t1`).
    pub fn value_at(&self, t: f64) -> &DMatrix<f64> {
        let k = self.breakpoints[1..]
            .iter()
            .position(|&b| t < b)
            .unwrap_or(self.values.len() - 1);
        &self.values[k]
    }

    /// Checks that the schedule covers exactly `[t0, t1]` for an `n`-state system.
    pub fn check_covers(&self, horizon: &HorizonSpec, n: usize) -> Result<(), ModelError> {
        let tol = 1e-12 * horizon.duration().max(1.0);
        if (self.start() - horizon.t0).abs() > tol || (self.end() - horizon.t1).abs() > tol {
            return Err(ModelError::InvalidSchedule(format!(
                "schedule spans [{}, {}], horizon is [{}, {}]",
                self.start(),
                self.end(),
                horizon.t0,
                horizon.t1
            )));
        }
        if self.n() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "schedule is {}x{}, system has n = {n}",
                self.n(),
                self.n()
            )));
        }
        Ok(())
    }
}

/// JSON problem document. Matrices are row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "X0")]
    pub x0: Vec<Vec<f64>>,
    pub t0: f64,
    pub t1: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Optional piecewise-constant gain schedule `C_t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub breakpoints: Vec<f64>,
    /// One gain matrix `C` per interval.
    pub gains: Vec<Vec<Vec<f64>>>,
}

/// Row-major nested arrays to a dense matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ModelError> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(ModelError::MalformedMatrix(
            "rows must be non-empty and of equal length".into(),
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ProblemSpec {
    pub fn system(&self) -> Result<LtiSystem, ModelError> {
        validate_system(matrix_from_rows(&self.a)?, matrix_from_rows(&self.b)?)
    }

    pub fn horizon(&self) -> Result<HorizonSpec, ModelError> {
        HorizonSpec::new(
            self.t0,
            self.t1,
            matrix_from_rows(&self.x0)?,
            self.alpha,
            self.gamma,
        )
    }

    /// The optional schedule, or `None` if the document has none.
    pub fn gain_schedule(&self) -> Result<Option<GainSchedule>, ModelError> {
        let Some(spec) = &self.schedule else {
            return Ok(None);
        };
        let gains = spec
            .gains
            .iter()
            .map(|g| matrix_from_rows(g))
            .collect::<Result<Vec<_>, _>>()?;
        GainSchedule::from_gains(spec.breakpoints.clone(), &gains, self.gamma).map(Some)
    }

    /// Validates everything and returns the parsed pieces.
    pub fn parse(&self) -> Result<(LtiSystem, HorizonSpec), ModelError> {
        let system = self.system()?;
        let horizon = self.horizon()?;
        if horizon.x0.nrows() != system.n() {
            return Err(ModelError::DimensionMismatch(format!(
                "X0 is {}x{}, system has n = {}",
                horizon.x0.nrows(),
                horizon.x0.ncols(),
                system.n()
            )));
        }
        if let Some(s) = self.gain_schedule()? {
            s.check_covers(&horizon, system.n())?;
        }
        Ok((system, horizon))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        matrix_from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn scalar_systems() {
        let s = validate_system(m(&[&[-0.5]]), m(&[&[1.0]])).unwrap();
        assert_eq!(s.n(), 1);
        assert!(matches!(
            validate_system(m(&[&[0.1]]), m(&[&[1.0]])),
            Err(ModelError::NotHurwitz { .. })
        ));
        assert!(LtiSystem::scalar(-0.595).is_ok());
        assert!(matches!(LtiSystem::scalar(0.0), Err(ModelError::NotHurwitz { .. })));
    }

    #[test]
    fn singular_b_and_dimensions() {
        let a = m(&[&[-1.0, 0.0], &[0.0, -2.0]]);
        assert!(matches!(
            validate_system(a.clone(), m(&[&[1.0, 1.0], &[1.0, 1.0]])),
            Err(ModelError::SingularB { .. })
        ));
        assert!(matches!(
            validate_system(a, m(&[&[1.0]])),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gain_products() {
        assert_eq!(gain_to_u(&m(&[&[2.0]]), 1).unwrap(), m(&[&[4.0]]));
        assert_eq!(gain_to_u(&DMatrix::identity(2, 2), 2).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(
            gain_to_u(&m(&[&[1.0, 1.0], &[0.0, 1.0]]), 2).unwrap(),
            m(&[&[1.0, 1.0], &[1.0, 2.0]])
        );
        assert!(gain_to_u(&m(&[&[1.0, 1.0]]), 3).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(GainSchedule::scalar(vec![0.0, 1.0, 2.0], &[0.0, 1.0], 1.0).is_ok());
        assert!(GainSchedule::scalar(vec![0.0, 1.0, 1.0], &[0.0, 1.0], 1.0).is_err());
        assert!(matches!(
            GainSchedule::scalar(vec![0.0, 1.0], &[1.5], 1.0),
            Err(ModelError::GainBound { .. })
        ));
        assert!(matches!(
            GainSchedule::scalar(vec![0.0, 1.0], &[-0.5], 1.0),
            Err(ModelError::NotPsd { .. })
        ));
        let s = GainSchedule::scalar(vec![0.0, 1.0, 2.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(s.value_at(0.5)[(0, 0)], 0.0);
        assert_eq!(s.value_at(1.0)[(0, 0)], 1.0);
        assert_eq!(s.value_at(2.0)[(0, 0)], 1.0);
    }

    #[test]
    fn horizon_validation() {
        let x0 = DMatrix::identity(1, 1);
        assert!(HorizonSpec::new(0.0, 1.0, x0.clone(), 1.0, 1.0).is_ok());
        assert!(HorizonSpec::new(1.0, 1.0, x0.clone(), 1.0, 1.0).is_err());
        assert!(HorizonSpec::new(0.0, 1.0, x0.clone(), 0.0, 1.0).is_err());
        assert!(HorizonSpec::new(0.0, 1.0, x0, 1.0, -1.0).is_err());
        assert!(HorizonSpec::new(0.0, 1.0, m(&[&[-1.0]]), 1.0, 1.0).is_err());
        // x0 = 0 is accepted.
        assert!(HorizonSpec::new(0.0, 1.0, m(&[&[0.0]]), 1.0, 1.0).is_ok());
    }

    #[test]
    fn problem_json() {
        let doc = r#"{"A": [[-0.5]], "B": [[1]], "X0": [[1]], "t0": 0, "t1": 5,
                      "alpha": 0.5, "gamma": 1,
                      "schedule": {"breakpoints": [0, 2, 5], "gains": [[[0]], [[1]]]}}"#;
        let p: ProblemSpec = serde_json::from_str(doc).unwrap();
        let (sys, hz) = p.parse().unwrap();
        assert_eq!(sys.n(), 1);
        assert_eq!(hz.t1, 5.0);
        let s = p.gain_schedule().unwrap().unwrap();
        assert_eq!(s.values()[1][(0, 0)], 1.0);
        let back: ProblemSpec = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn validation_is_deterministic() {
        let a = m(&[&[-0.3, 2.0], &[-1.0, -0.2]]);
        let b = DMatrix::identity(2, 2);
        let r1 = validate_system(a.clone(), b.clone()).is_ok();
        for _ in 0..10 {
            assert_eq!(validate_system(a.clone(), b.clone()).is_ok(), r1);
        }
    }

    proptest::proptest! {
        #[test]
        fn gain_to_u_is_psd(entries in proptest::collection::vec(-3.0f64..3.0, 9)) {
            let c = DMatrix::from_row_slice(3, 3, &entries);
            let u = gain_to_u(&c, 3).unwrap();
            proptest::prop_assert_eq!(&u, &u.transpose());
            let min = linalg::sym_eig(&u).eigenvalues[0];
            proptest::prop_assert!(min >= -3.0 * f64::EPSILON * c.norm_squared() * 4.0);
        }
    }
}
