//! Dense symmetric linear algebra: eigen-solves, PSD projection, square roots,
//! Lyapunov equations and the filter algebraic Riccati equation.
//!
//! Everything here is sized for desk-scale problems (`n ≤ 20`). Symmetric
//! results are re-symmetrized before they are returned.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::LtiSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("Lyapunov operator is singular (λ_i(F) + λ_j(F) ≈ 0)")]
    ResonantSpectrum,
    #[error("Newton-Kleinman did not converge in {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },
    #[error("matrix is indefinite: eigenvalue {min_eig:e} below -{tol:e}")]
    IndefiniteInput { min_eig: f64, tol: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors, one per column, in eigenvalue order.
    pub eigenvectors: DMatrix<f64>,
}

impl SymEig {
    /// `Q diag(f(λ)) Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let mut scaled = q.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            let s = f(l);
            scaled.column_mut(j).scale_mut(s);
        }
        symmetrize(&(scaled * q.transpose()))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(|l| l)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }
}

/// Eigendecomposition of the symmetric part of `m`.
pub fn sym_eig(m: &DMatrix<f64>) -> SymEig {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    SymEig {
        eigenvalues,
        eigenvectors,
    }
}

/// Eigenvalues only, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Frobenius-nearest PSD matrix (eigenvalue clipping at zero).
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eig(m);
    if e.min() >= 0.0 {
        return symmetrize(m);
    }
    e.reconstruct_with(|l| l.max(0.0))
}

/// Symmetric PSD square root `S` with `SᵀS = S² = M`.
///
/// Eigenvalues in `[-1e-7 ‖M‖_F, 0)` are clipped to zero; anything more
/// negative is rejected.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let e = sym_eig(m);
    let tol = 1e-7 * m.norm();
    if e.min() < -tol {
        return Err(LinalgError::IndefiniteInput {
            min_eig: e.min(),
            tol,
        });
    }
    Ok(e.reconstruct_with(|l| l.max(0.0).sqrt()))
}

fn vec_col_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Solves `F X + X Fᵀ + Q = 0` by Kronecker vectorization.
pub fn solve_lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = f.nrows();
    if !f.is_square() || q.shape() != (n, n) {
        return Err(LinalgError::DimensionMismatch(format!(
            "F is {:?}, Q is {:?}",
            f.shape(),
            q.shape()
        )));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(f) + f.kronecker(&eye);
    let rhs = -vec_col_major(q);
    let sol = op.lu().solve(&rhs).ok_or(LinalgError::ResonantSpectrum)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::ResonantSpectrum);
    }
    let x = symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice()));
    let scale = f.norm() * x.norm() + q.norm();
    if lyapunov_residual(f, q, &x) > 1e-6 * scale.max(f64::MIN_POSITIVE) {
        return Err(LinalgError::ResonantSpectrum);
    }
    Ok(x)
}

/// `‖F X + X Fᵀ + Q‖_F`.
pub fn lyapunov_residual(f: &DMatrix<f64>, q: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (f * x + x * f.transpose() + q).norm()
}

/// `‖A X + X Aᵀ − X CᵀC X + B Bᵀ‖_F`.
pub fn are_residual(system: &LtiSystem, c: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let a = system.a();
    let u = c.transpose() * c;
    (a * x + x * a.transpose() - x * u * x + system.noise_covariance()).norm()
}

/// Scale against which [`are_residual`] is judged.
pub fn are_scale(system: &LtiSystem, c: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    system.a().norm() * x.norm() + x.norm_squared() * c.norm_squared() + system.noise_covariance().norm()
}

const NK_MAX_ITERS: usize = 200;

/// Stabilizing solution of `A X + X Aᵀ − X CᵀC X + B Bᵀ = 0`.
///
/// Newton-Kleinman from the zero gain, which is stabilizing because `A` is
/// Hurwitz. Stops once `‖X_{k+1} − X_k‖_F ≤ 1e-12 ‖X_k‖_F`.
pub fn solve_are(system: &LtiSystem, c: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = system.n();
    if c.ncols() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "gain has {} columns, state dimension is {n}",
            c.ncols()
        )));
    }
    let a = system.a();
    let bbt = system.noise_covariance();
    let mut x = solve_lyapunov(a, &bbt)?;
    let mut last_step = f64::INFINITY;
    for _ in 0..NK_MAX_ITERS {
        let gain = &x * c.transpose();
        let closed = a - &gain * c;
        let q = &bbt + &gain * gain.transpose();
        let next = solve_lyapunov(&closed, &q)?;
        last_step = (&next - &x).norm();
        let converged = last_step <= 1e-12 * x.norm();
        x = next;
        if converged {
            return Ok(x);
        }
    }
    Err(LinalgError::NoConvergence {
        iterations: NK_MAX_ITERS,
        last_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_system;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        symmetrize(&DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
    }

    fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> LtiSystem {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let shift = sym_eig(&m).max() + 0.1;
        let a = m - DMatrix::identity(n, n) * shift;
        let b = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
            + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3));
        validate_system(a, b).unwrap()
    }

    #[test]
    fn eig_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..8 {
            let m = random_sym(&mut rng, n);
            let e = sym_eig(&m);
            assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            assert!((e.reconstruct() - &m).norm() <= 1e-10 * m.norm().max(1.0));
            let q = &e.eigenvectors;
            assert!((q.transpose() * q - DMatrix::identity(n, n)).norm() <= 1e-10 * n as f64);
        }
    }

    #[test]
    fn lyapunov_examples() {
        let x = solve_lyapunov(&DMatrix::from_element(1, 1, -0.5), &DMatrix::identity(1, 1)).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
        let x = solve_lyapunov(&(-DMatrix::identity(2, 2)), &DMatrix::identity(2, 2)).unwrap();
        assert!((x - DMatrix::identity(2, 2) * 0.5).norm() < 1e-14);
        let f = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -2.0]);
        let q = DMatrix::identity(2, 2);
        let x = solve_lyapunov(&f, &q).unwrap();
        assert!(lyapunov_residual(&f, &q, &x) <= 1e-9 * (f.norm() * x.norm() + q.norm()));
    }

    #[test]
    fn lyapunov_resonant() {
        // λ = ±1: λ_1 + λ_2 = 0.
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(solve_lyapunov(&f, &q), Err(LinalgError::ResonantSpectrum));
    }

    #[test]
    fn are_scalar_examples() {
        let sys = LtiSystem::scalar(-0.5).unwrap();
        let x = solve_are(&sys, &DMatrix::zeros(1, 1)).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
        let x = solve_are(&sys, &DMatrix::identity(1, 1)).unwrap();
        let expected = 1.0 / (1.25f64.sqrt() + 0.5);
        assert!((x[(0, 0)] - expected).abs() < 1e-12);
        assert!((x[(0, 0)] - 0.618034).abs() < 1e-6);
    }

    #[test]
    fn are_random_residual_and_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2, 3, 5] {
            let sys = random_stable(&mut rng, n);
            for c in [DMatrix::identity(n, n), DMatrix::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0))] {
                let x = solve_are(&sys, &c).unwrap();
                let res = are_residual(&sys, &c, &x);
                assert!(res <= 1e-9 * are_scale(&sys, &c, &x), "residual {res}");
                assert!(sym_eig(&x).min() > 0.0);
                let closed = sys.a() - &x * c.transpose() * &c;
                let max_re = closed
                    .complex_eigenvalues()
                    .iter()
                    .map(|l| l.re)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(max_re < 0.0);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        assert!((psd_project(&m) - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0])).norm() < 1e-14);
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let expected = DMatrix::from_element(2, 2, 0.5);
        assert!((psd_project(&m) - expected).norm() < 1e-14);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((psd_project(&p) - &p).norm() < 1e-12);
    }

    #[test]
    fn sqrt_examples() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = sym_sqrt(&m).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-14);
        assert_eq!(sym_sqrt(&DMatrix::zeros(2, 2)).unwrap(), DMatrix::zeros(2, 2));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = sym_sqrt(&m).unwrap();
        assert!((s.transpose() * &s - &m).norm() <= 1e-9 * m.norm());
        assert!(matches!(
            sym_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5])),
            Err(LinalgError::IndefiniteInput { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn projection_idempotent_and_contractive(entries in proptest::collection::vec(-5.0f64..5.0, 16),
                                                 other in proptest::collection::vec(-5.0f64..5.0, 16)) {
            let m = symmetrize(&DMatrix::from_row_slice(4, 4, &entries));
            let p = psd_project(&m);
            proptest::prop_assert!(sym_eig(&p).min() >= -1e-12 * m.norm().max(1.0));
            proptest::prop_assert!((psd_project(&p) - &p).norm() <= 1e-10 * m.norm().max(1.0));
            // Projection onto a convex set is non-expansive.
            let m2 = symmetrize(&DMatrix::from_row_slice(4, 4, &other));
            let p2 = psd_project(&m2);
            proptest::prop_assert!((&p - &p2).norm() <= (&m - &m2).norm() + 1e-10);
        }
    }
}
