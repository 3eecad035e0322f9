//! Minimum-principle machinery: the canonical state/costate equations, the
//! pointwise Hamiltonian minimizer over `{0 ⪯ U ⪯ γI}`, and a residual
//! certificate measuring how far a candidate schedule is from satisfying the
//! minimum condition.
//!
//! For `n ≥ 2` this is a checker only; it does not synthesize schedules.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::csvout;
use crate::linalg::{sym_eig, symmetrize};
use crate::model::{GainSchedule, HorizonSpec, LtiSystem};
use crate::riccati::{integrate_riccati, riccati_rhs, RiccatiError, RiccatiTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PmpError {
    #[error("switching matrix is not symmetric (asymmetry {0:e})")]
    AsymmetricInput(f64),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

/// Minimizer of `Tr(M U)` over `0 ⪯ U ⪯ γI`.
#[derive(Debug, Clone)]
pub struct HamiltonianMin {
    pub u: DMatrix<f64>,
    /// `Tr(M U⋆)`.
    pub value: f64,
    /// Exact minimum `γ Σ min(λ_i(M), 0)`.
    pub min_value: f64,
}

/// `U⋆ = γ Q₋Q₋ᵀ` over eigenvectors of `M` with `λ < −ε`, `ε = 1e-9 max(1, ‖M‖_F)`.
///
/// Eigenvalues inside the band `[−ε, ε]` are assigned zero control.
pub fn hamiltonian_argmin(m: &DMatrix<f64>, gamma: f64) -> Result<HamiltonianMin, PmpError> {
    let scale = m.norm().max(1.0);
    let asym = (m - m.transpose()).norm();
    if asym > 1e-9 * scale {
        return Err(PmpError::AsymmetricInput(asym));
    }
    let eps = 1e-9 * scale;
    let eig = sym_eig(m);
    let u = eig.reconstruct_with(|l| if l < -eps { gamma } else { 0.0 });
    let min_value = gamma * eig.eigenvalues.iter().map(|&l| l.min(0.0)).sum::<f64>();
    let value = (m * &u).trace();
    Ok(HamiltonianMin {
        u,
        value,
        min_value,
    })
}

/// `M = α X − X P X`, the coefficient of `U` in the Hamiltonian.
pub fn switching_matrix(x: &DMatrix<f64>, p: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    symmetrize(&(x * alpha - x * p * x))
}

/// `Tr(M U) − min_{0 ⪯ V ⪯ γI} Tr(M V)`.
pub fn hamiltonian_gap(m: &DMatrix<f64>, u: &DMatrix<f64>, gamma: f64) -> Result<f64, PmpError> {
    let h = hamiltonian_argmin(m, gamma)?;
    Ok((m * u).trace() - h.min_value)
}

/// Costate path and pointwise Hamiltonian gap of a candidate schedule.
#[derive(Debug, Clone)]
pub struct PmpCertificate {
    pub times: Vec<f64>,
    pub x: Vec<DMatrix<f64>>,
    /// Costate, with `P(t1) = 0`.
    pub p: Vec<DMatrix<f64>>,
    pub gap: Vec<f64>,
    pub max_gap: f64,
}

impl PmpCertificate {
    /// Writes `t, gap`.
    pub fn write_gap_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csvout::writer(sink);
        w.write_record(["t", "gap"])?;
        for (t, g) in self.times.iter().zip(&self.gap) {
            w.write_record([csvout::float(*t), csvout::float(*g)])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Costate<'a> {
    a: &'a DMatrix<f64>,
    alpha: f64,
}

impl Costate<'_> {
    /// `Ṗ = P X U + U X P − P A − Aᵀ P − I − α U`.
    fn eval(&self, p: &DMatrix<f64>, x: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        let n = p.nrows();
        let pxu = p * x * u;
        let pa = p * self.a;
        &pxu + pxu.transpose() - &pa - pa.transpose() - DMatrix::identity(n, n) - u * self.alpha
    }
}

/// Integrates the state forward and the costate backward on the same grid and
/// evaluates the Hamiltonian gap at every grid point.
pub fn integrate_canonical(
    system: &LtiSystem,
    horizon: &HorizonSpec,
    schedule: &GainSchedule,
    dt: f64,
) -> Result<PmpCertificate, PmpError> {
    let traj = integrate_riccati(system, horizon, schedule, dt)?;
    certify_trajectory(system, horizon, &traj)
}

/// Costate sweep and gap profile for an already integrated trajectory.
pub fn certify_trajectory(
    system: &LtiSystem,
    horizon: &HorizonSpec,
    traj: &RiccatiTrajectory,
) -> Result<PmpCertificate, PmpError> {
    let n = system.n();
    let costate = Costate {
        a: system.a(),
        alpha: horizon.alpha,
    };
    let len = traj.times.len();
    let mut p = vec![DMatrix::zeros(n, n); len];
    for seg in (0..traj.controls.len()).rev() {
        let u = &traj.controls[seg];
        let (lo, hi) = (traj.segment_starts[seg], traj.segment_starts[seg + 1]);
        for k in (lo..hi).rev() {
            let h = traj.times[k + 1] - traj.times[k];
            let (x0, x1) = (&traj.x[k], &traj.x[k + 1]);
            let d0 = riccati_rhs(system, x0, u);
            let d1 = riccati_rhs(system, x1, u);
            // Cubic Hermite midpoint.
            let xm = (x0 + x1) * 0.5 + (d0 - d1) * (h / 8.0);
            let p1 = &p[k + 1];
            let k1 = costate.eval(p1, x1, u);
            let k2 = costate.eval(&(p1 - &k1 * (0.5 * h)), &xm, u);
            let k3 = costate.eval(&(p1 - &k2 * (0.5 * h)), &xm, u);
            let k4 = costate.eval(&(p1 - &k3 * h), x0, u);
            p[k] = symmetrize(&(p1 - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
        }
    }
    let mut gap = Vec::with_capacity(len);
    for k in 0..len {
        let m = switching_matrix(&traj.x[k], &p[k], horizon.alpha);
        let u = &traj.controls[traj.segment_of(k)];
        gap.push(hamiltonian_gap(&m, u, horizon.gamma)?);
    }
    let max_gap = gap.iter().copied().fold(0.0, f64::max);
    Ok(PmpCertificate {
        times: traj.times.clone(),
        x: traj.x.clone(),
        p,
        gap,
        max_gap,
    })
}

/// Largest pointwise Hamiltonian gap; zero (to tolerance) is necessary for optimality.
pub fn pmp_residual(certificate: &PmpCertificate) -> f64 {
    certificate.gap.iter().copied().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_system;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feasible(rng: &mut ChaCha8Rng, n: usize, gamma: f64) -> DMatrix<f64> {
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=gamma)).collect();
        symmetrize(&(&q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d)) * q.transpose()))
    }

    #[test]
    fn scalar_sign_rule() {
        let h = hamiltonian_argmin(&DMatrix::from_element(1, 1, 0.3), 2.0).unwrap();
        assert_eq!(h.u[(0, 0)], 0.0);
        let h = hamiltonian_argmin(&DMatrix::from_element(1, 1, -0.3), 2.0).unwrap();
        assert_eq!(h.u[(0, 0)], 2.0);
        let h = hamiltonian_argmin(&DMatrix::from_element(1, 1, 1e-12), 2.0).unwrap();
        assert_eq!(h.u[(0, 0)], 0.0);
    }

    #[test]
    fn diagonal_example() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let h = hamiltonian_argmin(&m, 3.0).unwrap();
        assert!((h.u - DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 3.0])).norm() < 1e-14);
        assert!((h.value + 6.0).abs() < 1e-14);
        assert!((h.min_value + 6.0).abs() < 1e-14);
    }

    #[test]
    fn asymmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(hamiltonian_argmin(&m, 1.0), Err(PmpError::AsymmetricInput(_))));
    }

    #[test]
    fn random_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = symmetrize(&DMatrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0)));
        let h = hamiltonian_argmin(&m, 2.0).unwrap();
        for _ in 0..100_000 {
            let u = random_feasible(&mut rng, 4, 2.0);
            assert!(h.value <= (&m * &u).trace() + 1e-12);
        }
    }

    #[test]
    fn costate_boundary_and_symmetry() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.4, -0.2, -0.6]);
        let sys = validate_system(a, DMatrix::identity(2, 2)).unwrap();
        let hz = HorizonSpec::new(0.0, 3.0, DMatrix::identity(2, 2), 0.4, 2.0).unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, -0.1, 0.5]);
        let sched = GainSchedule::from_gains(
            vec![0.0, 1.2, 3.0],
            &[c, DMatrix::zeros(2, 2)],
            2.0,
        )
        .unwrap();
        let cert = integrate_canonical(&sys, &hz, &sched, 3.0 / 1024.0).unwrap();
        assert_eq!(cert.p.last().unwrap(), &DMatrix::zeros(2, 2));
        for p in &cert.p {
            assert!((p - p.transpose()).norm() <= 1e-9);
        }
        assert!(cert.gap.iter().all(|&g| g >= -1e-10));
        assert_eq!(pmp_residual(&cert), cert.max_gap);
    }

    #[test]
    fn zero_gap_profile() {
        let cert = PmpCertificate {
            times: vec![0.0, 1.0],
            x: vec![DMatrix::zeros(1, 1); 2],
            p: vec![DMatrix::zeros(1, 1); 2],
            gap: vec![0.0, 0.0],
            max_gap: 0.0,
        };
        assert_eq!(pmp_residual(&cert), 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn argmin_beats_random_feasible(entries in proptest::collection::vec(-3.0f64..3.0, 9),
                                        gamma in 0.1f64..5.0, seed in 0u64..10_000) {
            let m = symmetrize(&DMatrix::from_row_slice(3, 3, &entries));
            let h = hamiltonian_argmin(&m, gamma).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let u = random_feasible(&mut rng, 3, gamma);
                proptest::prop_assert!(h.value <= (&m * &u).trace() + 1e-12);
                proptest::prop_assert!(hamiltonian_gap(&m, &u, gamma).unwrap() >= -1e-10);
            }
        }
    }
}
