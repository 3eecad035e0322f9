//! Monte-Carlo check of the identity `E‖x_t − x̂_t‖² = Tr(X_t)`.
//!
//! Source and channel are discretized by Euler-Maruyama and the Kalman-Bucy
//! filter runs with the gain `X_k C_kᵀ` taken from the covariance flow on the
//! same grid. Every path draws from its own ChaCha stream keyed by
//! `(seed, path index)`, so results do not depend on how paths are scheduled
//! across threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvout;
use crate::linalg::{sym_sqrt, LinalgError};
use crate::model::{GainSchedule, HorizonSpec, LtiSystem, ModelError};
use crate::riccati::{integrate_riccati, rk4_step, steps_for, RiccatiError};

/// Two-sided acceptance band on the z-score.
pub const Z_THRESHOLD: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy)]
pub struct SimulationOptions {
    pub num_paths: usize,
    pub dt_sim: f64,
    pub seed: u64,
    /// Keep each path's integrated squared error.
    pub keep_paths: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            num_paths: 10_000,
            dt_sim: 1e-3,
            seed: 0,
            keep_paths: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub num_paths: usize,
    /// Step actually used (the horizon divided into an even number of steps).
    pub dt_sim: f64,
    pub mse_estimate: f64,
    pub stderr: f64,
    pub mse_theory: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub report: SimulationReport,
    pub per_path: Option<Vec<f64>>,
}

impl SimulationOutput {
    /// Writes `path, integrated_sq_error` if per-path results were kept.
    pub fn write_paths_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csvout::writer(sink);
        w.write_record(["path", "integrated_sq_error"])?;
        for (i, v) in self.per_path.iter().flatten().enumerate() {
            w.write_record([i.to_string(), csvout::float(*v)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pass/fail verdict of a Monte-Carlo report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseVerdict {
    pub estimate: f64,
    pub stderr: f64,
    pub z_score: f64,
    pub pass: bool,
}

impl MseVerdict {
    pub fn from_parts(estimate: f64, theory: f64, stderr: f64) -> Self {
        let z_score = (estimate - theory) / stderr;
        Self {
            estimate,
            stderr,
            z_score,
            pass: z_score.abs() <= Z_THRESHOLD,
        }
    }
}

pub fn estimate_mse(report: &SimulationReport) -> MseVerdict {
    MseVerdict::from_parts(report.mse_estimate, report.mse_theory, report.stderr)
}

/// Simulation grid: per-step gains and filter gains, plus the snapped schedule.
struct Grid {
    h: f64,
    steps: usize,
    /// Index of the active gain on step `k`.
    gain_index: Vec<usize>,
    filter_gain: Vec<DMatrix<f64>>,
    schedule: GainSchedule,
}

fn build_grid(
    system: &LtiSystem,
    horizon: &HorizonSpec,
    breakpoints: &[f64],
    gains: &[DMatrix<f64>],
    dt_sim: f64,
) -> Result<Grid, SimError> {
    let n = system.n();
    if gains.iter().any(|c| c.shape() != (n, n)) {
        return Err(SimError::DimensionMismatch(format!("gains must be {n}x{n}")));
    }
    if !(dt_sim > 0.0 && dt_sim.is_finite()) {
        return Err(SimError::InvalidArgument(format!("dt_sim = {dt_sim}")));
    }
    let requested = GainSchedule::from_gains(breakpoints.to_vec(), gains, horizon.gamma)?;
    requested.check_covers(horizon, n)?;
    let steps = steps_for(horizon.duration(), dt_sim);
    let h = horizon.duration() / steps as f64;
    // Snap interior breakpoints onto the grid.
    let mut nodes = vec![0usize];
    let mut kept = vec![0usize];
    for (k, &b) in breakpoints.iter().enumerate().skip(1).take(gains.len() - 1) {
        let node = ((b - horizon.t0) / h).round() as usize;
        if node > *nodes.last().unwrap() && node < steps {
            nodes.push(node);
            kept.push(k);
        } else {
            *kept.last_mut().unwrap() = k;
        }
    }
    nodes.push(steps);
    let snapped_bp: Vec<f64> = nodes
        .iter()
        .map(|&i| if i == steps { horizon.t1 } else { horizon.t0 + i as f64 * h })
        .collect();
    let snapped_gains: Vec<DMatrix<f64>> = kept.iter().map(|&k| gains[k].clone()).collect();
    let schedule = GainSchedule::from_gains(snapped_bp, &snapped_gains, horizon.gamma)?;

    let mut gain_index = Vec::with_capacity(steps);
    for seg in 0..snapped_gains.len() {
        gain_index.extend(std::iter::repeat_n(seg, nodes[seg + 1] - nodes[seg]));
    }
    let mut filter_gain = Vec::with_capacity(steps);
    let mut x = horizon.x0.clone();
    for &seg in &gain_index {
        let c = &snapped_gains[seg];
        filter_gain.push(&x * c.transpose());
        x = rk4_step(system, &x, &schedule.values()[seg], h);
    }
    Ok(Grid {
        h,
        steps,
        gain_index,
        filter_gain,
        schedule,
    })
}

/// Row-major copy for the hot loop.
fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect()
}

fn matvec_add(out: &mut [f64], m: &[f64], v: &[f64], scale: f64) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        *o += scale * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Simulates `num_paths` source/channel/filter paths and compares the
/// time-integrated squared error with `∫ Tr(X_t) dt`.
///
/// `gains[k]` is the channel gain on `[breakpoints[k], breakpoints[k + 1])`.
/// Interior breakpoints are snapped to the nearest simulation node.
pub fn simulate_paths(
    system: &LtiSystem,
    horizon: &HorizonSpec,
    breakpoints: &[f64],
    gains: &[DMatrix<f64>],
    options: SimulationOptions,
) -> Result<SimulationOutput, SimError> {
    if options.num_paths < 2 {
        return Err(SimError::InvalidArgument("num_paths must be at least 2".into()));
    }
    let n = system.n();
    let grid = build_grid(system, horizon, breakpoints, gains, options.dt_sim)?;
    let theory = integrate_riccati(system, horizon, &grid.schedule, grid.h)?;

    let a = flat(system.a());
    let b = flat(system.b());
    let init = flat(&sym_sqrt(&horizon.x0)?);
    let c: Vec<Vec<f64>> = {
        let snapped: Vec<DMatrix<f64>> = grid
            .schedule
            .breakpoints()
            .iter()
            .take(grid.schedule.values().len())
            .map(|&t| {
                let k = breakpoints[1..].iter().position(|&b| t < b).unwrap_or(gains.len() - 1);
                gains[k].clone()
            })
            .collect();
        snapped.iter().map(flat).collect()
    };
    let k_gain: Vec<Vec<f64>> = grid.filter_gain.iter().map(flat).collect();
    let h = grid.h;
    let sqrt_h = h.sqrt();

    let per_path: Vec<f64> = (0..options.num_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(path as u64);
            let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
            let z: Vec<f64> = (0..n).map(|_| normal()).collect();
            let mut x = vec![0.0; n];
            matvec_add(&mut x, &init, &z, 1.0);
            let mut xh = vec![0.0; n];
            let mut xi = vec![0.0; n];
            let mut eta = vec![0.0; n];
            let mut innov = vec![0.0; n];
            let mut x_next = vec![0.0; n];
            let mut xh_next = vec![0.0; n];
            let sq = |x: &[f64], xh: &[f64]| -> f64 {
                x.iter().zip(xh).map(|(p, q)| (p - q) * (p - q)).sum()
            };
            let mut acc = 0.5 * sq(&x, &xh);
            for k in 0..grid.steps {
                let ck = &c[grid.gain_index[k]];
                let kk = &k_gain[k];
                for v in xi.iter_mut().chain(eta.iter_mut()) {
                    *v = normal();
                }
                // dy − C x̂ dt = C (x − x̂) dt + √dt η
                innov.iter_mut().zip(&eta).for_each(|(o, e)| *o = sqrt_h * e);
                let err: Vec<f64> = x.iter().zip(&xh).map(|(p, q)| p - q).collect();
                matvec_add(&mut innov, ck, &err, h);

                x_next.copy_from_slice(&x);
                matvec_add(&mut x_next, &a, &x, h);
                matvec_add(&mut x_next, &b, &xi, sqrt_h);
                xh_next.copy_from_slice(&xh);
                matvec_add(&mut xh_next, &a, &xh, h);
                matvec_add(&mut xh_next, kk, &innov, 1.0);
                std::mem::swap(&mut x, &mut x_next);
                std::mem::swap(&mut xh, &mut xh_next);
                let w = if k + 1 == grid.steps { 0.5 } else { 1.0 };
                acc += w * sq(&x, &xh);
            }
            acc * h
        })
        .collect();

    let count = per_path.len() as f64;
    let mean = per_path.iter().sum::<f64>() / count;
    let var = per_path.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    let stderr = (var / count).sqrt();
    let report = SimulationReport {
        num_paths: options.num_paths,
        dt_sim: h,
        mse_estimate: mean,
        stderr,
        mse_theory: theory.mse_integral,
        z_score: (mean - theory.mse_integral) / stderr,
    };
    Ok(SimulationOutput {
        report,
        per_path: options.keep_paths.then_some(per_path),
    })
}

/// Exact expectation of the Monte-Carlo estimator for the discretized scheme.
///
/// The error `e = x − x̂` obeys `e_{k+1} = (I + (A − K_k C_k) h) e_k + √h (B ξ − K_k η)`,
/// so its second moment follows a deterministic recursion. This isolates the
/// time-discretization bias from sampling noise.
pub fn discrete_expected_estimate(
    system: &LtiSystem,
    horizon: &HorizonSpec,
    breakpoints: &[f64],
    gains: &[DMatrix<f64>],
    dt_sim: f64,
) -> Result<f64, SimError> {
    let n = system.n();
    let grid = build_grid(system, horizon, breakpoints, gains, dt_sim)?;
    let h = grid.h;
    let seg_gains: Vec<DMatrix<f64>> = grid
        .schedule
        .breakpoints()
        .iter()
        .take(grid.schedule.values().len())
        .map(|&t| {
            let k = breakpoints[1..].iter().position(|&b| t < b).unwrap_or(gains.len() - 1);
            gains[k].clone()
        })
        .collect();
    let bbt = system.noise_covariance();
    let mut p = horizon.x0.clone();
    let mut acc = 0.5 * p.trace();
    for k in 0..grid.steps {
        let c = &seg_gains[grid.gain_index[k]];
        let kk = &grid.filter_gain[k];
        let f = DMatrix::identity(n, n) + (system.a() - kk * c) * h;
        p = &f * &p * f.transpose() + (&bbt + kk * kk.transpose()) * h;
        let w = if k + 1 == grid.steps { 0.5 } else { 1.0 };
        acc += w * p.trace();
    }
    Ok(acc * h)
}
