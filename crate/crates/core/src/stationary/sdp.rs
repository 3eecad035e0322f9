//! Conic form of the stationary design problem and an ADMM solver for it.
//! The default solver is the interior-point method in `ipm`.
//!
//! Variables are `z = (svec X, svec Y)`. The constraints are written as
//! `G z + h ∈ K` with `K` a product of three PSD cones:
//!
//! ```text
//! S₁ = A X + X Aᵀ + B Bᵀ                         ⪰ 0   (n × n)
//! S₂ = [[γI − Y A − Aᵀ Y, −Y B], [−Bᵀ Y, I]]      ⪰ 0   (2n × 2n)
//! S₃ = [[X, I], [I, Y]]                           ⪰ 0   (2n × 2n)
//! ```
//!
//! and the objective is `Tr X + α Tr(Bᵀ Y B) + 2α Tr A`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::sym_eig;
use crate::model::LtiSystem;

/// Default stopping tolerance on the normalized residuals.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Iteration cap for the interior-point solver.
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const ADMM_MAX_ITERS: usize = 200_000;
/// Target and budget of the ADMM pass that polishes the interior-point answer.
const POLISH_TOL: f64 = 1e-12;
/// Polish iterations times `n³`; large instances skip the polish.
const POLISH_WORK: usize = 20_000;
/// Over-relaxation parameter.
const RELAXATION: f64 = 1.6;
/// Residuals are evaluated every this many iterations.
const CHECK_EVERY: usize = 10;
const RHO_UPDATE_EVERY: usize = 50;
/// Dual norm beyond which the problem is declared infeasible.
const DIVERGENCE_NORM: f64 = 1e14;

#[derive(Debug, Error, Clone)]
pub enum SdpError {
    #[error("SDP solver stopped after {iterations} iterations (primal {primal:e}, dual {dual:e}, gap {gap:e})", iterations = .best.residuals.iterations, primal = .best.residuals.primal, dual = .best.residuals.dual, gap = .best.residuals.gap)]
    MaxIters { best: Box<SdpSolution> },
    #[error("dual iterates diverged (norm {0:e}); the instance looks infeasible")]
    InfeasibleDetected(f64),
}

/// `svec` length for an `n × n` symmetric matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper triangle, column by column, off-diagonals scaled by `√2`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut v = DVector::zeros(svec_len(n));
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            v[k] = if i == j {
                m[(i, i)]
            } else {
                std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)])
            };
            k += 1;
        }
    }
    v
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] * std::f64::consts::FRAC_1_SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct SdpInstance {
    n: usize,
    alpha: f64,
    gamma: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    pub(super) g: DMatrix<f64>,
    pub(super) h: DVector<f64>,
    pub(super) c: DVector<f64>,
    pub(super) offset: f64,
}

impl SdpInstance {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Sizes of the three PSD blocks.
    pub fn block_sizes(&self) -> [usize; 3] {
        [self.n, 2 * self.n, 2 * self.n]
    }

    pub fn num_variables(&self) -> usize {
        self.g.ncols()
    }

    /// `Tr X + α Tr(Bᵀ Y B) + 2α Tr A`.
    pub fn objective(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        x.trace() + self.alpha * (self.b.transpose() * y * &self.b).trace() + self.offset
    }

    /// The three constraint blocks at `(X, Y)`, each required PSD.
    pub fn blocks(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> [DMatrix<f64>; 3] {
        let n = self.n;
        let (a, b) = (&self.a, &self.b);
        let s1 = a * x + x * a.transpose() + b * b.transpose();
        let mut s2 = DMatrix::zeros(2 * n, 2 * n);
        let ya = y * a;
        let yb = y * b;
        s2.view_mut((0, 0), (n, n))
            .copy_from(&(DMatrix::identity(n, n) * self.gamma - &ya - ya.transpose()));
        s2.view_mut((0, n), (n, n)).copy_from(&(-&yb));
        s2.view_mut((n, 0), (n, n)).copy_from(&(-yb.transpose()));
        s2.view_mut((n, n), (n, n)).fill_with_identity();
        let mut s3 = DMatrix::zeros(2 * n, 2 * n);
        s3.view_mut((0, 0), (n, n)).copy_from(x);
        s3.view_mut((0, n), (n, n)).fill_with_identity();
        s3.view_mut((n, 0), (n, n)).fill_with_identity();
        s3.view_mut((n, n), (n, n)).copy_from(y);
        [s1, s2, s3]
    }

    fn stack(&self, blocks: &[DMatrix<f64>; 3]) -> DVector<f64> {
        let parts: Vec<DVector<f64>> = blocks.iter().map(svec).collect();
        DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
    }

    pub(super) fn split(&self, z: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let nt = svec_len(self.n);
        (
            smat(&z.as_slice()[..nt], self.n),
            smat(&z.as_slice()[nt..], self.n),
        )
    }
}

/// Builds `(G, h, c)` by applying the affine maps to basis matrices.
pub fn assemble_sdp(system: &LtiSystem, alpha: f64, gamma: f64) -> SdpInstance {
    let n = system.n();
    let nt = svec_len(n);
    let mut inst = SdpInstance {
        n,
        alpha,
        gamma,
        a: system.a().clone(),
        b: system.b().clone(),
        g: DMatrix::zeros(0, 0),
        h: DVector::zeros(0),
        c: DVector::zeros(2 * nt),
        offset: 2.0 * alpha * system.a().trace(),
    };
    let zero = DMatrix::zeros(n, n);
    inst.h = inst.stack(&inst.blocks(&zero, &zero));
    let rows = inst.h.len();
    let mut g = DMatrix::zeros(rows, 2 * nt);
    let mut e = vec![0.0; nt];
    for k in 0..2 * nt {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[k % nt] = 1.0;
        let basis = smat(&e, n);
        let (x, y) = if k < nt { (&basis, &zero) } else { (&zero, &basis) };
        let col = inst.stack(&inst.blocks(x, y)) - &inst.h;
        g.set_column(k, &col);
        inst.c[k] = inst.objective(x, y) - inst.offset;
    }
    inst.g = g;
    inst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub iterations: usize,
}

impl SolverResiduals {
    fn worst(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

/// Stacked slack and dual of a finished solve.
#[derive(Debug, Clone)]
pub(super) struct Iterate {
    pub s: DVector<f64>,
    pub lambda: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub objective: f64,
    /// Dual objective `−λᵀh` plus the constant offset.
    pub dual_objective: f64,
    pub residuals: SolverResiduals,
}

struct Admm<'a> {
    inst: &'a SdpInstance,
    chol: Cholesky<f64, Dyn>,
    offsets: Vec<(usize, usize)>,
}

impl<'a> Admm<'a> {
    fn new(inst: &'a SdpInstance) -> Self {
        let gtg = inst.g.transpose() * &inst.g;
        let chol = Cholesky::new(gtg).expect("G has full column rank");
        let mut offsets = Vec::new();
        let mut at = 0;
        for size in inst.block_sizes() {
            offsets.push((at, size));
            at += svec_len(size);
        }
        Self { inst, chol, offsets }
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for &(at, size) in &self.offsets {
            let len = svec_len(size);
            let m = smat(&v.as_slice()[at..at + len], size);
            let p = sym_eig(&m).reconstruct_with(|l| l.max(0.0));
            out.rows_mut(at, len).copy_from(&svec(&p));
        }
        out
    }

    fn residuals(&self, z: &DVector<f64>, s: &DVector<f64>, lambda: &DVector<f64>, iterations: usize) -> SolverResiduals {
        let inst = self.inst;
        let gz = &inst.g * z;
        let rp = (&gz + &inst.h - s).norm() / (1.0 + gz.norm().max(inst.h.norm()).max(s.norm()));
        let gtl = inst.g.transpose() * lambda;
        let rd = (&inst.c - &gtl).norm() / (1.0 + inst.c.norm().max(gtl.norm()));
        let pobj = inst.c.dot(z);
        let dobj = -lambda.dot(&inst.h);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        SolverResiduals {
            primal: rp,
            dual: rd,
            gap,
            iterations,
        }
    }

    fn solution(&self, z: &DVector<f64>, lambda: &DVector<f64>, residuals: SolverResiduals) -> SdpSolution {
        let (x, y) = self.inst.split(z);
        SdpSolution {
            objective: self.inst.objective(&x, &y),
            dual_objective: -lambda.dot(&self.inst.h) + self.inst.offset,
            x,
            y,
            residuals,
        }
    }
}

/// Solves the relaxed problem.
///
/// The interior-point method gets to `tol` in a few dozen steps. Its iterates
/// are only `O(√μ)` accurate along flat directions of the objective, so the
/// answer is then polished by a warm-started ADMM pass. The polished iterate
/// is returned when that pass reaches its own tighter target within a budget
/// that shrinks with `n³`.
pub fn solve_sdp(instance: &SdpInstance, tol: f64, max_iters: usize) -> Result<SdpSolution, SdpError> {
    let (rough, warm) = super::ipm::interior_point(instance, tol, max_iters)?;
    let iters = POLISH_WORK / instance.n().pow(3);
    if iters < CHECK_EVERY {
        return Ok(rough);
    }
    match admm(instance, POLISH_TOL.min(tol), iters, Some(&warm)) {
        Ok(mut sol) => {
            sol.residuals.iterations += rough.residuals.iterations;
            Ok(sol)
        }
        Err(_) => Ok(rough),
    }
}

/// Solves the relaxed problem by ADMM with over-relaxation and adaptive `ρ`.
///
/// The normal matrix `GᵀG` does not depend on `ρ`, so it is factored once.
/// Much slower than [`solve_sdp`] at the tolerances used here.
pub fn solve_sdp_admm(instance: &SdpInstance, tol: f64, max_iters: usize) -> Result<SdpSolution, SdpError> {
    admm(instance, tol, max_iters, None)
}

fn admm(instance: &SdpInstance, tol: f64, max_iters: usize, warm: Option<&Iterate>) -> Result<SdpSolution, SdpError> {
    let admm = Admm::new(instance);
    let (g, h, c) = (&instance.g, &instance.h, &instance.c);
    let mut z;
    let mut rho = 1.0;
    let (mut s, mut u) = match warm {
        Some(w) => (w.s.clone(), &w.lambda / -rho),
        None => (admm.project(h), DVector::zeros(h.len())),
    };
    let mut best: Option<SdpSolution> = None;
    let mut rp_acc = 0.0;
    let mut rd_acc = 0.0;
    for it in 1..=max_iters {
        let rhs = -(c / rho) - g.transpose() * (h - &s + &u);
        z = admm.chol.solve(&rhs);
        let gzh = g * &z + h;
        let relaxed = &gzh * RELAXATION + &s * (1.0 - RELAXATION);
        let s_new = admm.project(&(&relaxed + &u));
        u += &relaxed - &s_new;
        let ds = (&s_new - &s).norm();
        s = s_new;

        if it % CHECK_EVERY == 0 || it == max_iters {
            let lambda = &u * (-rho);
            let norm = lambda.norm();
            if !norm.is_finite() || norm > DIVERGENCE_NORM {
                return Err(SdpError::InfeasibleDetected(norm));
            }
            let res = admm.residuals(&z, &s, &lambda, it);
            if best.as_ref().is_none_or(|b| res.worst() < b.residuals.worst()) {
                best = Some(admm.solution(&z, &lambda, res));
            }
            if res.worst() <= tol {
                return Ok(best.unwrap());
            }
        }
        rp_acc += (&gzh - &s).norm() / (1.0 + gzh.norm());
        rd_acc += rho * ds / (1.0 + c.norm());
        if it % RHO_UPDATE_EVERY == 0 {
            let ratio = (rp_acc / rd_acc.max(1e-300)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                u *= rho / new_rho;
                rho = new_rho;
            }
            rp_acc = 0.0;
            rd_acc = 0.0;
        }
    }
    Err(SdpError::MaxIters {
        best: Box::new(best.expect("at least one residual check")),
    })
}
