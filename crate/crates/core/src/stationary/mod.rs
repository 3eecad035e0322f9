//! Time-invariant gain design.
//!
//! The relaxed SDP gives `(X, Y)`. When `[[X, I], [I, Y]]` has rank `n` the
//! relaxation is exact, and the gain is recovered from `CᵀC = YA + AᵀY + YBBᵀY`.
//! The gain is then checked by plugging it into the algebraic Riccati equation.

mod ipm;
pub mod sdp;

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::csvout;
use crate::linalg::{solve_are, sym_eig, sym_eigenvalues, LinalgError};
use crate::model::{matrix_to_rows, validate_system, LtiSystem};
use crate::scalar::{thresholds, Case};

pub use ipm::solve_sdp_ipm;
use sdp::{assemble_sdp, solve_sdp, SdpError, SolverResiduals, DEFAULT_MAX_ITERS};

/// `λ_{n+1}/λ₁` at or below which the relaxation is taken as exact.
pub const RANK_TOL: f64 = 1e-6;
/// Relative slack on `λ_max(CᵀC) ≤ γ`.
pub const GAIN_BOUND_REL: f64 = 1e-6;
/// Relative SDP/ARE objective agreement required for certification.
pub const OBJECTIVE_REL_TOL: f64 = 1e-6;
/// Negative eigenvalues of `CᵀC` down to `-CLIP_REL · max(1, ‖S‖₂)` are rounding.
const CLIP_REL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum StationaryError {
    #[error("YA + AᵀY + YBBᵀY has eigenvalue {min_eig:e} below -{tol:e}; the SDP solve is inexact")]
    IndefiniteS { min_eig: f64, tol: f64 },
    #[error("reconstructed gain violates the bound: λ_max(CᵀC) = {max_eig} > γ = {gamma}")]
    GainBoundViolated { max_eig: f64, gamma: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Random stable system: `A = M − (λ_max(sym M) + 0.1) I`, `B` orthogonal.
pub fn random_system(n: usize, seed: u64) -> LtiSystem {
    random_system_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_system_with<R: Rng>(n: usize, rng: &mut R) -> LtiSystem {
    let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng));
    let m: DMatrix<f64> = draw(n, n);
    let shift = sym_eig(&((&m + m.transpose()) * 0.5)).max() + 0.1;
    let a = m - DMatrix::identity(n, n) * shift;
    let qr = draw(n, n).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    validate_system(a, q).expect("shifted matrix is Hurwitz")
}

/// Eigenvalues of `[[X, I], [I, Y]]`, descending.
pub fn block_spectrum(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(x);
    m.view_mut((0, n), (n, n)).fill_with_identity();
    m.view_mut((n, 0), (n, n)).fill_with_identity();
    m.view_mut((n, n), (n, n)).copy_from(y);
    let mut ev = sym_eigenvalues(&m);
    ev.reverse();
    ev
}

/// `λ_{n+1}/λ₁` of `[[X, I], [I, Y]]`.
pub fn check_rank(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let ev = block_spectrum(x, y);
    ev[x.nrows()] / ev[0]
}

/// Symmetric `C` with `CᵀC = YA + AᵀY + YBBᵀY`.
pub fn reconstruct_gain(system: &LtiSystem, y: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>, StationaryError> {
    let a = system.a();
    let yb = y * system.b();
    let s = y * a + a.transpose() * y + &yb * yb.transpose();
    let e = sym_eig(&s);
    let tol = CLIP_REL * e.min().abs().max(e.max().abs()).max(1.0);
    if e.min() < -tol {
        return Err(StationaryError::IndefiniteS { min_eig: e.min(), tol });
    }
    if e.max() > gamma * (1.0 + GAIN_BOUND_REL) {
        return Err(StationaryError::GainBoundViolated { max_eig: e.max(), gamma });
    }
    Ok(e.reconstruct_with(|l| l.clamp(0.0, gamma).sqrt()))
}

/// `Tr X + α Tr(C X Cᵀ)` at the stabilizing Riccati solution for `C`.
pub fn verify_stationary(system: &LtiSystem, c: &DMatrix<f64>, alpha: f64) -> Result<f64, StationaryError> {
    let x = solve_are(system, c)?;
    Ok(x.trace() + alpha * (c * &x * c.transpose()).trace())
}

/// `(x⋆, u⋆)` of the scalar stationary problem with `b = 1`.
pub fn scalar_stationary_closed_form(a: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let (low, high) = thresholds(a, gamma);
    match case_of(alpha, low, high) {
        Case::A => (-0.5 / a, 0.0),
        Case::B => (alpha.sqrt(), 2.0 * a / alpha.sqrt() + 1.0 / alpha),
        Case::C => ((a + (a * a + gamma).sqrt()) / gamma, gamma),
    }
}

fn case_of(alpha: f64, low: f64, high: f64) -> Case {
    if alpha > high {
        Case::A
    } else if alpha < low {
        Case::C
    } else {
        Case::B
    }
}

fn rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(matrix_to_rows(m))
}

#[derive(Debug, Clone, Serialize)]
pub struct StationarySolution {
    pub n: usize,
    pub alpha: f64,
    pub gamma: f64,
    #[serde(serialize_with = "rows")]
    pub x: DMatrix<f64>,
    #[serde(serialize_with = "rows")]
    pub y: DMatrix<f64>,
    pub objective_value: f64,
    pub dual_objective: f64,
    pub rank_gap: f64,
    pub rank_exact: bool,
    #[serde(serialize_with = "rows")]
    pub c: DMatrix<f64>,
    /// Eigenvalues of `CᵀC`, ascending.
    pub gain_spectrum: Vec<f64>,
    pub are_objective: f64,
    /// Steady-state `Tr(C X Cᵀ)` at the Riccati solution.
    pub mi_rate: f64,
    pub objective_mismatch: f64,
    /// Rank-exact and the ARE plug-in agrees with the SDP value.
    pub certified: bool,
    pub solver_residuals: SolverResiduals,
}

/// Solves, certifies and cross-checks the stationary design problem.
pub fn solve_stationary(
    system: &LtiSystem,
    alpha: f64,
    gamma: f64,
    tol: f64,
) -> Result<StationarySolution, StationaryError> {
    if !(alpha > 0.0 && alpha.is_finite() && gamma > 0.0 && gamma.is_finite()) {
        return Err(StationaryError::InvalidArgument(format!(
            "need alpha > 0 and gamma > 0, got alpha = {alpha}, gamma = {gamma}"
        )));
    }
    if !(tol > 0.0) {
        return Err(StationaryError::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let sol = solve_sdp(&assemble_sdp(system, alpha, gamma), tol, DEFAULT_MAX_ITERS)?;
    let rank_gap = check_rank(&sol.x, &sol.y);
    let c = reconstruct_gain(system, &sol.y, gamma)?;
    let x_are = solve_are(system, &c)?;
    let mi_rate = (&c * &x_are * c.transpose()).trace();
    let are_objective = x_are.trace() + alpha * mi_rate;
    let objective_mismatch = (sol.objective - are_objective).abs() / are_objective.abs();
    let rank_exact = rank_gap <= RANK_TOL;
    Ok(StationarySolution {
        n: system.n(),
        alpha,
        gamma,
        gain_spectrum: sym_eigenvalues(&(c.transpose() * &c)),
        objective_value: sol.objective,
        dual_objective: sol.dual_objective,
        rank_gap,
        rank_exact,
        certified: rank_exact && objective_mismatch <= OBJECTIVE_REL_TOL,
        x: sol.x,
        y: sol.y,
        c,
        are_objective,
        mi_rate,
        objective_mismatch,
        solver_residuals: sol.residuals,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// `None` when the trial succeeded.
    pub error: Option<String>,
    pub rank_gap: f64,
    pub objective_value: f64,
    pub are_objective: f64,
    pub objective_mismatch: f64,
    pub certified: bool,
    /// Eigenvalues of `[[X, I], [I, Y]]`, descending.
    pub block_spectrum: Vec<f64>,
    pub gain_spectrum: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub n: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub trials: usize,
    pub seed: u64,
    pub succeeded: usize,
    pub failed: usize,
    pub rank_exact: usize,
    pub certified: usize,
    pub rank_gap_max: f64,
    pub rank_gap_median: f64,
    pub objective_mismatch_max: f64,
    pub records: Vec<TrialRecord>,
}

impl ExperimentSummary {
    /// Long format: `trial,index,eigenvalue` of the block matrix.
    pub fn write_rank_spectra_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        self.write_spectra(sink, |r| &r.block_spectrum)
    }

    /// Long format: `trial,index,eigenvalue` of `CᵀC`.
    pub fn write_gain_spectra_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        self.write_spectra(sink, |r| &r.gain_spectrum)
    }

    fn write_spectra<W: Write>(&self, sink: W, pick: impl Fn(&TrialRecord) -> &Vec<f64>) -> csv::Result<()> {
        let mut w = csvout::writer(sink);
        w.write_record(["trial", "index", "eigenvalue"])?;
        for r in &self.records {
            for (i, v) in pick(r).iter().enumerate() {
                w.write_record([r.trial.to_string(), i.to_string(), csvout::float(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// System for `trial`: ChaCha8 seeded with `seed`, stream `trial`.
pub fn trial_system(n: usize, seed: u64, trial: usize) -> LtiSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    random_system_with(n, &mut rng)
}

/// Solves `trials` random instances. Failed trials are recorded, not fatal.
pub fn random_experiment(
    n: usize,
    alpha: f64,
    gamma: f64,
    trials: usize,
    seed: u64,
) -> Result<ExperimentSummary, StationaryError> {
    if n == 0 || trials == 0 {
        return Err(StationaryError::InvalidArgument(format!(
            "need n ≥ 1 and trials ≥ 1, got n = {n}, trials = {trials}"
        )));
    }
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let system = trial_system(n, seed, trial);
            match solve_stationary(&system, alpha, gamma, sdp::DEFAULT_TOL) {
                Ok(s) => TrialRecord {
                    trial,
                    error: None,
                    rank_gap: s.rank_gap,
                    objective_value: s.objective_value,
                    are_objective: s.are_objective,
                    objective_mismatch: s.objective_mismatch,
                    certified: s.certified,
                    block_spectrum: block_spectrum(&s.x, &s.y),
                    gain_spectrum: s.gain_spectrum,
                },
                Err(e) => TrialRecord {
                    trial,
                    error: Some(e.to_string()),
                    rank_gap: f64::NAN,
                    objective_value: f64::NAN,
                    are_objective: f64::NAN,
                    objective_mismatch: f64::NAN,
                    certified: false,
                    block_spectrum: Vec::new(),
                    gain_spectrum: Vec::new(),
                },
            }
        })
        .collect();
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let mut gaps: Vec<f64> = ok.iter().map(|r| r.rank_gap).collect();
    gaps.sort_by(f64::total_cmp);
    let median = match gaps.len() {
        0 => f64::NAN,
        k if k % 2 == 1 => gaps[k / 2],
        k => 0.5 * (gaps[k / 2 - 1] + gaps[k / 2]),
    };
    Ok(ExperimentSummary {
        n,
        alpha,
        gamma,
        trials,
        seed,
        succeeded: ok.len(),
        failed: trials - ok.len(),
        rank_exact: ok.iter().filter(|r| r.rank_gap <= RANK_TOL).count(),
        certified: ok.iter().filter(|r| r.certified).count(),
        rank_gap_max: gaps.last().copied().unwrap_or(f64::NAN),
        rank_gap_median: median,
        objective_mismatch_max: ok.iter().map(|r| r.objective_mismatch).fold(f64::NAN, f64::max),
        records,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub objective_value: f64,
    pub mse_rate: f64,
    pub mi_rate: f64,
    pub rank_gap: f64,
    pub gain_spectrum: Vec<f64>,
}

/// Stationary designs for one system over a list of `α`.
pub fn alpha_sweep(system: &LtiSystem, alphas: &[f64], gamma: f64) -> Result<Vec<SweepPoint>, StationaryError> {
    alphas
        .iter()
        .map(|&alpha| {
            let s = solve_stationary(system, alpha, gamma, sdp::DEFAULT_TOL)?;
            Ok(SweepPoint {
                alpha,
                objective_value: s.objective_value,
                mse_rate: s.are_objective - alpha * s.mi_rate,
                mi_rate: s.mi_rate,
                rank_gap: s.rank_gap,
                gain_spectrum: s.gain_spectrum,
            })
        })
        .collect()
}

/// `index,eigenvalue` rows of a single spectrum.
pub fn write_spectrum_csv<W: Write>(values: &[f64], sink: W) -> csv::Result<()> {
    let mut w = csvout::writer(sink);
    w.write_record(["index", "eigenvalue"])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), csvout::float(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: `alpha,index,eigenvalue` of `CᵀC`.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], sink: W) -> csv::Result<()> {
    let mut w = csvout::writer(sink);
    w.write_record(["alpha", "index", "eigenvalue"])?;
    for p in points {
        for (i, v) in p.gain_spectrum.iter().enumerate() {
            w.write_record([csvout::float(p.alpha), i.to_string(), csvout::float(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{solve_lyapunov, sym_sqrt};
    use crate::riccati::rk4_step;

    const A: f64 = -0.595;

    fn scalar(a: f64) -> LtiSystem {
        LtiSystem::scalar(a).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let (x, u) = scalar_stationary_closed_form(-0.5, 2.0, 100.0);
        assert!((x - 1.0).abs() < 1e-15 && u == 0.0);
        let (x, u) = scalar_stationary_closed_form(A, 0.476, 1.0);
        assert!((x - 0.689_928).abs() < 1e-6 && (u - 0.376_021_5).abs() < 1e-7);
        let (x, u) = scalar_stationary_closed_form(A, 0.173, 1.0);
        assert!((x - 0.568_626).abs() < 1e-6 && u == 1.0);
    }

    #[test]
    fn rank_gap_examples() {
        let x = DMatrix::identity(1, 1);
        let y = DMatrix::from_element(1, 1, 2.0);
        let expected = (3.0 - 5f64.sqrt()) / (3.0 + 5f64.sqrt());
        assert!((check_rank(&x, &y) - expected).abs() < 1e-12);
        assert!((expected - 0.1459).abs() < 1e-4);

        let x = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let y = x.clone().try_inverse().unwrap();
        assert!(check_rank(&x, &y) <= 1e-12);
    }

    #[test]
    fn scalar_case_b_pipeline() {
        let s = solve_stationary(&scalar(A), 0.476, 1.0, sdp::DEFAULT_TOL).unwrap();
        assert!((s.c[(0, 0)] - 0.376_021_5f64.sqrt()).abs() < 1e-7, "{s:?}");
        assert!((s.c[(0, 0)] - 0.613_206).abs() < 1e-6);
        assert!((s.objective_value - 0.813_416).abs() < 1e-6);
        assert!((s.are_objective - 0.813_416).abs() < 1e-6);
        assert!((s.x[(0, 0)] * s.y[(0, 0)] - 1.0).abs() < 1e-8);
        assert!(s.certified);
    }

    #[test]
    fn zero_gain_objective_is_lyapunov_trace() {
        let sys = random_system(4, 3);
        let c = DMatrix::zeros(4, 4);
        let lyap = solve_lyapunov(sys.a(), &sys.noise_covariance()).unwrap();
        assert!((verify_stationary(&sys, &c, 0.3).unwrap() - lyap.trace()).abs() < 1e-10 * lyap.trace());
    }

    #[test]
    fn zero_gain_reconstruction() {
        // y solves 2ay + y² = 0.
        let sys = scalar(-0.5);
        let c = reconstruct_gain(&sys, &DMatrix::from_element(1, 1, 1.0), 1.0).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
    }

    #[test]
    fn reconstruction_errors() {
        let sys = scalar(-0.5);
        assert!(matches!(
            reconstruct_gain(&sys, &DMatrix::from_element(1, 1, 0.5), 1.0),
            Err(StationaryError::IndefiniteS { .. })
        ));
        // 2(−0.5)(3) + 9 = 6 > γ.
        assert!(matches!(
            reconstruct_gain(&sys, &DMatrix::from_element(1, 1, 3.0), 1.0),
            Err(StationaryError::GainBoundViolated { .. })
        ));
    }

    #[test]
    fn n5_reconstruction_residual() {
        let sys = random_system(5, 11);
        let s = solve_stationary(&sys, 0.1, 1.0, sdp::DEFAULT_TOL).unwrap();
        let (a, y) = (sys.a(), &s.y);
        let yb = y * sys.b();
        let target = y * a + a.transpose() * y + &yb * yb.transpose();
        let residual = (s.c.transpose() * &s.c - target).norm();
        assert!(residual <= 1e-8, "{residual:e}");
    }

    #[test]
    fn n3_sdp_matches_are() {
        for seed in 0..5 {
            let s = solve_stationary(&random_system(3, seed), 0.1, 1.0, sdp::DEFAULT_TOL).unwrap();
            assert!(s.rank_gap <= RANK_TOL, "{s:?}");
            assert!(s.objective_mismatch <= 1e-6, "{s:?}");
            assert!(s.gain_spectrum.last().unwrap() <= &(1.0 + 1e-6));
        }
    }

    #[test]
    fn scalar_product_is_one() {
        for (a, alpha, gamma) in [(-0.5, 2.0, 100.0), (A, 0.476, 1.0), (A, 0.173, 1.0), (-2.0, 0.01, 5.0)] {
            let s = solve_stationary(&scalar(a), alpha, gamma, sdp::DEFAULT_TOL).unwrap();
            let (x, u) = scalar_stationary_closed_form(a, alpha, gamma);
            assert!((s.x[(0, 0)] * s.y[(0, 0)] - 1.0).abs() < 1e-8, "{s:?}");
            assert!((s.x[(0, 0)] - x).abs() < 1e-7 && (s.c[(0, 0)].powi(2) - u).abs() < 1e-7, "{s:?}");
        }
    }

    #[test]
    fn mi_rate_decreases_with_alpha() {
        let sys = random_system(4, 5);
        let alphas = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0];
        let pts = alpha_sweep(&sys, &alphas, 10.0).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].mi_rate <= w[0].mi_rate + 1e-6 * (1.0 + w[0].mi_rate), "{w:?}");
            assert!(w[1].mse_rate >= w[0].mse_rate - 1e-6);
        }
    }

    #[test]
    fn riccati_flow_reaches_are() {
        let sys = random_system(3, 2);
        let s = solve_stationary(&sys, 0.1, 1.0, sdp::DEFAULT_TOL).unwrap();
        let x_are = solve_are(&sys, &s.c).unwrap();
        let u = s.c.transpose() * &s.c;
        let horizon = 50.0 / sys.spectral_abscissa().abs();
        let steps = (horizon / 0.01).ceil() as usize;
        let h = horizon / steps as f64;
        let mut x = DMatrix::zeros(3, 3);
        for _ in 0..steps {
            x = rk4_step(&sys, &x, &u, h);
        }
        assert!((&x - &x_are).norm() <= 1e-6, "{}", (&x - &x_are).norm());
        // The reconstructed gain is one of the square roots of CᵀC.
        assert!((sym_sqrt(&u).unwrap() - &s.c).norm() < 1e-8);
    }

    #[test]
    fn experiment_is_deterministic() {
        let a = random_experiment(3, 0.1, 1.0, 4, 9).unwrap();
        let b = random_experiment(3, 0.1, 1.0, 4, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.failed, 0);
        assert_eq!(a.rank_exact, 4);
        let mut buf = Vec::new();
        a.write_rank_spectra_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 4 * 6);
        assert_ne!(trial_system(3, 9, 0).a(), trial_system(3, 9, 1).a());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(solve_stationary(&scalar(-1.0), 0.0, 1.0, 1e-9).is_err());
        assert!(random_experiment(2, 0.1, 1.0, 0, 0).is_err());
    }
}
