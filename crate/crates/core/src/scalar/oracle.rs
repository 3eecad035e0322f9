//! Exhaustive search over three-piece controls, for cross-checking the solver.

use rayon::prelude::*;
use serde::Serialize;

use super::{classify_case, Case, ScalarError, ScalarProblem};
use crate::model::GainSchedule;
use crate::riccati::ScalarFlow;

/// RK4 substeps per grid cell (even, for Simpson).
const SUBSTEPS: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub best_cost: f64,
    /// Breakpoints of the merged best schedule, `t0` and `t1` included.
    pub breakpoints: Vec<f64>,
    /// Control level per merged piece.
    pub levels: Vec<f64>,
}

impl OracleResult {
    pub fn switch_count(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn schedule(&self, gamma: f64) -> GainSchedule {
        GainSchedule::scalar(self.breakpoints.clone(), &self.levels, gamma).expect("levels lie in [0, γ]")
    }
}

/// Minimum cost over controls `(v₁ on [t0, s₁], v₂ on [s₁, s₂], v₃ on [s₂, t1])`
/// with `vᵢ ∈ {0, γ}` (plus `u⋆` in case B) and `s₁ ≤ s₂` on a uniform grid of
/// `grid_resolution` cells.
pub fn brute_force_oracle(problem: &ScalarProblem, grid_resolution: usize) -> Result<OracleResult, ScalarError> {
    if grid_resolution < 64 {
        return Err(ScalarError::InvalidProblem(format!(
            "grid_resolution must be at least 64, got {grid_resolution}"
        )));
    }
    let n = grid_resolution;
    let pr = *problem;
    let h = (pr.t1 - pr.t0) / n as f64;
    let flow = ScalarFlow { a: pr.a, b2: 1.0 };
    let mut levels = vec![0.0, pr.gamma];
    if classify_case(problem).label == Case::B {
        levels.push(pr.u_star().clamp(0.0, pr.gamma));
    }
    let cell = |x: f64, u: f64| -> (f64, f64) {
        let (xe, ix) = flow.piece(x, u, h / SUBSTEPS as f64, SUBSTEPS);
        (xe, (1.0 + pr.alpha * u) * ix)
    };
    // Cost-to-here and state at every node under a constant first level.
    let prefix: Vec<(Vec<f64>, Vec<f64>)> = levels
        .iter()
        .map(|&u| {
            let (mut xs, mut js) = (vec![pr.x0], vec![0.0]);
            for _ in 0..n {
                let (x, j) = cell(*xs.last().unwrap(), u);
                js.push(js.last().unwrap() + j);
                xs.push(x);
            }
            (xs, js)
        })
        .collect();

    let nl = levels.len();
    let items: Vec<(usize, usize, usize)> = (0..nl)
        .flat_map(|v1| (0..=n).flat_map(move |i| (0..nl).map(move |v2| (v1, i, v2))))
        .filter(|&(v1, i, v2)| !(v1 == v2 && i > 0))
        .collect();
    let best = items
        .par_iter()
        .map(|&(v1, i, v2)| {
            let (xs, js) = &prefix[v1];
            let mut best = (f64::INFINITY, [0usize; 2], [0usize; 3]);
            let (mut x2, mut j2) = (xs[i], js[i]);
            for j in i..=n {
                for v3 in 0..nl {
                    if v3 == v2 && j < n {
                        continue;
                    }
                    let (mut x3, mut j3) = (x2, j2);
                    for _ in j..n {
                        let (x, dj) = cell(x3, levels[v3]);
                        x3 = x;
                        j3 += dj;
                    }
                    if j3 < best.0 {
                        best = (j3, [i, j], [v1, v2, v3]);
                    }
                }
                if j < n {
                    let (x, dj) = cell(x2, levels[v2]);
                    x2 = x;
                    j2 += dj;
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, [0; 2], [0; 3]), |acc, b| if b.0 < acc.0 { b } else { acc });

    let (cost, [i, j], vs) = best;
    let nodes = [0, i, j, n];
    let mut breakpoints = vec![pr.t0];
    let mut merged: Vec<f64> = Vec::new();
    for k in 0..3 {
        if nodes[k + 1] == nodes[k] {
            continue;
        }
        let u = levels[vs[k]];
        let end = if nodes[k + 1] == n { pr.t1 } else { pr.t0 + nodes[k + 1] as f64 * h };
        if merged.last() == Some(&u) {
            *breakpoints.last_mut().unwrap() = end;
        } else {
            merged.push(u);
            breakpoints.push(end);
        }
    }
    Ok(OracleResult {
        best_cost: cost,
        breakpoints,
        levels: merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::evaluate_cost;
    use crate::scalar::solve_scalar;

    #[test]
    fn rejects_coarse_grid() {
        let pr = ScalarProblem::new(-0.595, 0.926, 1.0, 1.0, 0.0, 5.0).unwrap();
        assert!(brute_force_oracle(&pr, 32).is_err());
    }

    #[test]
    fn case_a_matches_analytic() {
        let pr = ScalarProblem::new(-0.595, 0.926, 1.0, 4.0, 0.0, 8.0).unwrap();
        let oracle = brute_force_oracle(&pr, 128).unwrap();
        let sol = solve_scalar(&pr).unwrap();
        assert!(sol.cost.cost <= oracle.best_cost + 1e-9);
        assert!((oracle.best_cost - sol.cost.cost).abs() <= 1e-3 * sol.cost.cost);
        let replay = evaluate_cost(&pr.system(), &pr.horizon(), &oracle.schedule(pr.gamma), 8.0 / 4096.0).unwrap();
        assert!((replay.cost - oracle.best_cost).abs() < 1e-7 * replay.cost);
    }

    #[test]
    fn case_c_pattern_matches() {
        let pr = ScalarProblem::new(-0.595, 0.173, 1.0, 2.0, 0.0, 10.0).unwrap();
        let oracle = brute_force_oracle(&pr, 128).unwrap();
        let sol = solve_scalar(&pr).unwrap();
        assert_eq!(oracle.levels, sol.levels());
        assert!(sol.cost.cost <= oracle.best_cost + 1e-9);
    }

    #[test]
    fn refinement_is_monotone() {
        let pr = ScalarProblem::new(-0.595, 0.173, 1.0, 0.05, 0.0, 6.0).unwrap();
        let coarse = brute_force_oracle(&pr, 64).unwrap();
        let fine = brute_force_oracle(&pr, 128).unwrap();
        assert!(fine.best_cost <= coarse.best_cost + 1e-9);
    }
}
