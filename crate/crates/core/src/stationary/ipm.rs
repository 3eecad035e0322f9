//! Primal-dual interior-point method for the conic form in [`super::sdp`].
//!
//! Infeasible-start path following with the HKM search direction and a
//! Mehrotra predictor-corrector step. The Schur complement is formed densely
//! from the per-column block matrices of `G`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use super::sdp::{smat, svec, svec_len, Iterate, SdpError, SdpInstance, SdpSolution, SolverResiduals};
use crate::linalg::sym_eig;

/// Fraction of the distance to the cone boundary taken per step.
const STEP_FRACTION: f64 = 0.98;
/// Complementarity below which progress is considered exhausted.
const MU_FLOOR: f64 = 1e-300;
const REFINE_STEPS: usize = 2;

type Blocks = Vec<DMatrix<f64>>;

struct Layout {
    /// `(offset, size)` of each block inside the stacked `svec` vector.
    blocks: Vec<(usize, usize)>,
    /// Block matrices of every column of `G`, `None` where the column vanishes.
    columns: Vec<Vec<Option<DMatrix<f64>>>>,
}

impl Layout {
    fn new(inst: &SdpInstance) -> Self {
        let mut blocks = Vec::new();
        let mut at = 0;
        for size in inst.block_sizes() {
            blocks.push((at, size));
            at += svec_len(size);
        }
        let columns = (0..inst.g.ncols())
            .map(|j| {
                let col = inst.g.column(j);
                blocks
                    .iter()
                    .map(|&(at, size)| {
                        let part = col.rows(at, svec_len(size));
                        (part.amax() > 0.0).then(|| smat(part.as_slice(), size))
                    })
                    .collect()
            })
            .collect();
        Self { blocks, columns }
    }

    fn unstack(&self, v: &DVector<f64>) -> Blocks {
        self.blocks
            .iter()
            .map(|&(at, size)| smat(&v.as_slice()[at..at + svec_len(size)], size))
            .collect()
    }

    fn stack(&self, m: &[DMatrix<f64>]) -> DVector<f64> {
        let len = self.blocks.iter().map(|&(_, s)| svec_len(s)).sum();
        let mut v = DVector::zeros(len);
        for (&(at, size), b) in self.blocks.iter().zip(m) {
            v.rows_mut(at, svec_len(size)).copy_from(&svec(b));
        }
        v
    }

    /// `Gᵀ svec(M)`, using the block matrices of each column.
    fn adjoint(&self, m: &[DMatrix<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            self.columns.len(),
            self.columns.iter().map(|col| {
                col.iter()
                    .zip(m)
                    .filter_map(|(g, b)| g.as_ref().map(|g| g.dot(b)))
                    .sum::<f64>()
            }),
        )
    }
}

fn inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest step in `(0, 1]` keeping `X + t ΔX` positive definite, damped.
fn max_step(x: &[DMatrix<f64>], dx: &[DMatrix<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (m, d) in x.iter().zip(dx) {
        let Some(ch) = Cholesky::new(m.clone()) else {
            return 0.0;
        };
        let l = ch.l();
        let li = l.clone().try_inverse().expect("Cholesky factor is invertible");
        let w = sym(&(&li * d * li.transpose()));
        worst = worst.max(-sym_eig(&w).min());
    }
    if worst <= 0.0 {
        1.0
    } else {
        (STEP_FRACTION / worst).min(1.0)
    }
}

struct Factored {
    chol: Option<Cholesky<f64, Dyn>>,
    lu: LU<f64, Dyn, Dyn>,
}

impl Factored {
    fn new(m: DMatrix<f64>) -> Self {
        Self {
            chol: Cholesky::new(m.clone()),
            lu: m.lu(),
        }
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve(b),
            None => self.lu.solve(b).unwrap_or_else(|| DVector::zeros(b.len())),
        }
    }
}

/// Solves the relaxed problem to the normalized tolerance `tol`.
///
/// On `max_iters` exhaustion the error carries the last iterate.
pub fn solve_sdp_ipm(instance: &SdpInstance, tol: f64, max_iters: usize) -> Result<SdpSolution, SdpError> {
    interior_point(instance, tol, max_iters).map(|(sol, _)| sol)
}

/// Also returns `(svec S, svec Λ)` at termination.
pub(super) fn interior_point(instance: &SdpInstance, tol: f64, max_iters: usize) -> Result<(SdpSolution, Iterate), SdpError> {
    let lay = Layout::new(instance);
    let (h, c) = (&instance.h, &instance.c);
    let m = c.len();
    let nu: f64 = instance.block_sizes().iter().sum::<usize>() as f64;
    let scale = 10f64.max(h.amax()).max(c.amax()).max(nu.sqrt());
    let ident: Blocks = lay.blocks.iter().map(|&(_, s)| DMatrix::identity(s, s)).collect();

    let mut z = DVector::zeros(m);
    let mut s: Blocks = ident.iter().map(|i| i * scale).collect();
    let mut lam: Blocks = ident.iter().map(|i| i * scale).collect();
    let h_blocks = lay.unstack(h);
    let gtg = Cholesky::new(instance.g.transpose() * &instance.g).expect("G has full column rank");
    let mut last = None;

    for it in 0..=max_iters {
        let gz = lay.unstack(&(&instance.g * &z));
        let rp: Blocks = (0..3).map(|k| &gz[k] + &h_blocks[k] - &s[k]).collect();
        let rd = c - lay.adjoint(&lam);
        let mu = inner(&s, &lam) / nu;
        let pobj = c.dot(&z);
        let dobj = -inner(&h_blocks, &lam);
        let res = SolverResiduals {
            primal: lay.stack(&rp).norm() / (1.0 + h.norm()),
            dual: rd.norm() / (1.0 + c.norm()),
            gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
            iterations: it,
        };
        let (x, y) = instance.split(&z);
        let sol = SdpSolution {
            objective: instance.objective(&x, &y),
            dual_objective: dobj + instance.offset,
            x,
            y,
            residuals: res,
        };
        if !(pobj.is_finite() && dobj.is_finite()) {
            return Err(SdpError::InfeasibleDetected(lay.stack(&lam).norm()));
        }
        if res.primal.max(res.dual).max(res.gap) <= tol {
            let iterate = Iterate {
                s: lay.stack(&s),
                lambda: lay.stack(&lam),
            };
            return Ok((sol, iterate));
        }
        if it == max_iters || mu < MU_FLOOR {
            last = Some(sol);
            break;
        }
        let dual_norm = lay.stack(&lam).norm();
        if dual_norm > 1e14 * scale && res.primal > 1e-6 {
            return Err(SdpError::InfeasibleDetected(dual_norm));
        }

        let s_inv: Blocks = s
            .iter()
            .map(|b| {
                let inv = Cholesky::new(b.clone()).map(|c| c.inverse()).unwrap_or_else(|| b.clone().pseudo_inverse(0.0).unwrap());
                sym(&inv)
            })
            .collect();

        // Schur complement Mᵢⱼ = ⟨Gᵢ, S⁻¹ Gⱼ Λ⟩.
        let mut schur = DMatrix::zeros(m, m);
        let mut prod: Vec<Vec<Option<DMatrix<f64>>>> = Vec::with_capacity(m);
        for col in &lay.columns {
            prod.push(
                col.iter()
                    .enumerate()
                    .map(|(k, g)| g.as_ref().map(|g| &s_inv[k] * g * &lam[k]))
                    .collect(),
            );
        }
        for j in 0..m {
            for i in 0..=j {
                let v: f64 = (0..3)
                    .filter_map(|k| match (&lay.columns[i][k], &prod[j][k]) {
                        (Some(g), Some(p)) => Some(g.dot(p)),
                        _ => None,
                    })
                    .sum();
                schur[(i, j)] = v;
                schur[(j, i)] = v;
            }
        }
        let fac = Factored::new(schur);

        let direction = |rc: &Blocks| -> (DVector<f64>, Blocks, Blocks) {
            let t: Blocks = (0..3).map(|k| &rc[k] - &s_inv[k] * &rp[k] * &lam[k]).collect();
            let rhs = lay.adjoint(&t) - &rd;
            let mut dz = fac.solve(&rhs);
            // Iterative refinement against the unassembled operator.
            for _ in 0..REFINE_STEPS {
                let gdz = lay.unstack(&(&instance.g * &dz));
                let applied: Blocks = (0..3).map(|k| &s_inv[k] * &gdz[k] * &lam[k]).collect();
                let r = &rhs - lay.adjoint(&applied);
                dz += fac.solve(&r);
            }
            let gdz = lay.unstack(&(&instance.g * &dz));
            let ds: Blocks = (0..3).map(|k| &gdz[k] + &rp[k]).collect();
            let mut dl: Blocks = (0..3).map(|k| sym(&(&rc[k] - &s_inv[k] * &ds[k] * &lam[k]))).collect();
            // Least-norm correction restoring Gᵀ ΔΛ = r_d, lost to cancellation near the boundary.
            let miss = lay.unstack(&(&instance.g * gtg.solve(&(&rd - lay.adjoint(&dl)))));
            for k in 0..3 {
                dl[k] += &miss[k];
            }
            (dz, ds, dl)
        };

        // Predictor.
        let rc_aff: Blocks = (0..3).map(|k| -&lam[k]).collect();
        let (_, ds_a, dl_a) = direction(&rc_aff);
        let ap = max_step(&s, &ds_a);
        let ad = max_step(&lam, &dl_a);
        let s_try: Blocks = (0..3).map(|k| &s[k] + &ds_a[k] * ap).collect();
        let l_try: Blocks = (0..3).map(|k| &lam[k] + &dl_a[k] * ad).collect();
        let mu_aff = inner(&s_try, &l_try) / nu;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let rc: Blocks = (0..3)
            .map(|k| &s_inv[k] * (sigma * mu) - &lam[k] - &s_inv[k] * &ds_a[k] * &dl_a[k])
            .collect();
        let (dz, ds, dl) = direction(&rc);
        let ap = max_step(&s, &ds);
        let ad = max_step(&lam, &dl);
        z += &dz * ap;
        for k in 0..3 {
            s[k] += &ds[k] * ap;
            s[k] = sym(&s[k]);
            lam[k] += &dl[k] * ad;
            lam[k] = sym(&lam[k]);
        }
    }
    Err(SdpError::MaxIters {
        best: Box::new(last.expect("loop records the final iterate")),
    })
}
