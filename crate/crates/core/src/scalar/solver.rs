//! Subcase dispatch and switch-time computation for the scalar problem.
//!
//! Every candidate control is turned into a closed-form state/costate path
//! (state forward from `x0`, costate backward from `p(t1) = 0`) and checked
//! against the minimum condition on each segment before it is returned.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::closed_form::Piece;
use super::roots::{find_roots, SAMPLES};
use super::{classify_case, Case, CaseLabel, ScalarError, ScalarProblem};
use crate::csvout;
use crate::model::GainSchedule;
use crate::riccati::CostBreakdown;

/// Tolerance on `x p − α` when checking region membership and switch points.
const SURFACE_TOL: f64 = 1e-8;
/// Points per segment when checking region membership.
const CHECK_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subcase {
    #[serde(rename = "A-1")]
    A1,
    #[serde(rename = "A-2")]
    A2,
    #[serde(rename = "B-1")]
    B1,
    #[serde(rename = "B-2")]
    B2,
    #[serde(rename = "B-3")]
    B3,
    #[serde(rename = "B-4")]
    B4,
    #[serde(rename = "B-5")]
    B5,
    #[serde(rename = "C-1")]
    C1,
    #[serde(rename = "C-2")]
    C2,
    #[serde(rename = "C-3")]
    C3,
    #[serde(rename = "C-4")]
    C4,
}

impl Subcase {
    pub const ALL: [Subcase; 11] = [
        Subcase::A1,
        Subcase::A2,
        Subcase::B1,
        Subcase::B2,
        Subcase::B3,
        Subcase::B4,
        Subcase::B5,
        Subcase::C1,
        Subcase::C2,
        Subcase::C3,
        Subcase::C4,
    ];
}

impl fmt::Display for Subcase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subcase::A1 => "A-1",
            Subcase::A2 => "A-2",
            Subcase::B1 => "B-1",
            Subcase::B2 => "B-2",
            Subcase::B3 => "B-3",
            Subcase::B4 => "B-4",
            Subcase::B5 => "B-5",
            Subcase::C1 => "C-1",
            Subcase::C2 => "C-2",
            Subcase::C3 => "C-3",
            Subcase::C4 => "C-4",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Zero,
    Singular,
    Saturated,
}

/// One constant-control arc of the solution.
#[derive(Debug, Clone, Serialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub level: Level,
    pub u: f64,
    pub x_start: f64,
    pub x_end: f64,
    pub p_start: f64,
    pub p_end: f64,
    #[serde(skip)]
    piece: Piece,
}

impl Segment {
    pub fn x(&self, t: f64) -> f64 {
        self.piece.x(t)
    }

    pub fn p(&self, t: f64) -> f64 {
        self.piece.p(t, self.end, self.p_end)
    }

    pub fn integral_x(&self) -> f64 {
        self.piece.integral_x(self.end)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalarSolution {
    pub problem: ScalarProblem,
    pub case: CaseLabel,
    pub subcase: Subcase,
    /// Interior switch times, increasing.
    pub switch_times: Vec<f64>,
    pub u_star: Option<f64>,
    pub segments: Vec<Segment>,
    pub cost: CostBreakdown,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub p: f64,
    pub u: f64,
    pub segment: usize,
}

impl ScalarSolution {
    fn segment_at(&self, t: f64) -> &Segment {
        self.segments
            .iter()
            .find(|s| t < s.end)
            .unwrap_or_else(|| self.segments.last().unwrap())
    }

    pub fn x_at(&self, t: f64) -> f64 {
        self.segment_at(t).x(t)
    }

    pub fn p_at(&self, t: f64) -> f64 {
        self.segment_at(t).p(t)
    }

    pub fn u_at(&self, t: f64) -> f64 {
        self.segment_at(t).u
    }

    /// Control levels, one per segment.
    pub fn levels(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.u).collect()
    }

    pub fn schedule(&self) -> GainSchedule {
        let mut bps: Vec<f64> = self.segments.iter().map(|s| s.start).collect();
        bps.push(self.problem.t1);
        let gamma = self.problem.gamma.max(self.levels().into_iter().fold(0.0, f64::max));
        GainSchedule::scalar(bps, &self.levels(), gamma).expect("levels lie in [0, γ]")
    }

    /// `x p − α` at each switch time.
    pub fn switch_residuals(&self) -> Vec<f64> {
        self.segments[1..]
            .iter()
            .map(|s| s.x_start * s.p_start - self.problem.alpha)
            .collect()
    }

    /// `points` samples per segment, endpoints included.
    pub fn sample(&self, points: usize) -> Vec<TrajectorySample> {
        let points = points.max(2);
        let mut out = Vec::new();
        for (k, s) in self.segments.iter().enumerate() {
            for i in 0..points {
                let t = if i + 1 == points {
                    s.end
                } else {
                    s.start + (s.end - s.start) * i as f64 / (points - 1) as f64
                };
                out.push(TrajectorySample {
                    t,
                    x: s.x(t),
                    p: s.p(t),
                    u: s.u,
                    segment: k,
                });
            }
        }
        out
    }

    /// Writes `t, x, p, u, segment` samples.
    pub fn write_trajectory_csv<W: Write>(&self, sink: W, points: usize) -> csv::Result<()> {
        let mut w = csvout::writer(sink);
        w.write_record(["t", "x", "p", "u", "segment"])?;
        for s in self.sample(points) {
            w.write_record([
                csvout::float(s.t),
                csvout::float(s.x),
                csvout::float(s.p),
                csvout::float(s.u),
                s.segment.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Vector field of the canonical equations under the minimizing control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseSample {
    pub x: f64,
    pub p: f64,
    pub u: f64,
    pub dx: f64,
    pub dp: f64,
}

/// `n × n` grid over `[0, x_max] × [0, p_max]`.
pub fn phase_field(problem: &ScalarProblem, x_max: f64, p_max: f64, n: usize) -> Vec<PhaseSample> {
    let ScalarProblem { a, alpha, gamma, .. } = *problem;
    let n = n.max(2);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x = x_max * i as f64 / (n - 1) as f64;
            let p = p_max * j as f64 / (n - 1) as f64;
            let u = if x * p > alpha { gamma } else { 0.0 };
            out.push(PhaseSample {
                x,
                p,
                u,
                dx: 2.0 * a * x - u * x * x + 1.0,
                dp: 2.0 * u * x * p - 2.0 * a * p - 1.0 - alpha * u,
            });
        }
    }
    out
}

pub fn write_phase_field_csv<W: Write>(samples: &[PhaseSample], sink: W) -> csv::Result<()> {
    let mut w = csvout::writer(sink);
    w.write_record(["x", "p", "u", "dx", "dp"])?;
    for s in samples {
        w.write_record([s.x, s.p, s.u, s.dx, s.dp].map(csvout::float))?;
    }
    w.flush()?;
    Ok(())
}

struct Ctx<'a> {
    pr: &'a ScalarProblem,
    sqrt_alpha: f64,
    u_star: f64,
}

impl<'a> Ctx<'a> {
    fn new(pr: &'a ScalarProblem) -> Self {
        Self {
            pr,
            sqrt_alpha: pr.alpha.sqrt(),
            u_star: pr.u_star(),
        }
    }

    fn zero_from(&self, t: f64, x: f64) -> Piece {
        Piece::new(self.pr.a, 0.0, self.pr.alpha, t, x)
    }

    fn gamma_from(&self, t: f64, x: f64) -> Piece {
        Piece::new(self.pr.a, self.pr.gamma, self.pr.alpha, t, x)
    }

    fn xbar(&self, t: f64) -> f64 {
        self.zero_from(self.pr.t0, self.pr.x0).x(t)
    }

    fn pbar(&self, t: f64) -> f64 {
        self.zero_from(self.pr.t0, self.pr.x0).p(t, self.pr.t1, 0.0)
    }

    fn xhat(&self, t: f64) -> f64 {
        self.gamma_from(self.pr.t0, self.pr.x0).x(t)
    }

    fn level_value(&self, level: Level) -> f64 {
        match level {
            Level::Zero => 0.0,
            Level::Singular => self.u_star,
            Level::Saturated => self.pr.gamma,
        }
    }

    /// Builds the closed-form path for switches/levels and checks it.
    fn candidate(&self, switches: &[f64], levels: &[Level]) -> Result<Vec<Segment>, String> {
        let (t0, t1) = (self.pr.t0, self.pr.t1);
        let eps = 1e-13 * (t1 - t0).max(1.0);
        let mut bps = vec![t0];
        bps.extend_from_slice(switches);
        bps.push(t1);
        if bps.windows(2).any(|w| w[1] < w[0] - eps) {
            return Err(format!("switch times out of order: {switches:?}"));
        }
        // Merge zero-length arcs.
        let mut plan: Vec<(f64, f64, Level)> = Vec::new();
        for (w, &level) in bps.windows(2).zip(levels) {
            if w[1] - w[0] <= eps {
                continue;
            }
            match plan.last_mut() {
                Some(last) if last.2 == level => last.1 = w[1],
                _ => plan.push((w[0], w[1], level)),
            }
        }
        if let Some(first) = plan.first_mut() {
            first.0 = t0;
        }
        if let Some(last) = plan.last_mut() {
            last.1 = t1;
        }
        for k in 1..plan.len() {
            plan[k].0 = plan[k - 1].1;
        }

        let mut segs = Vec::with_capacity(plan.len());
        let mut x = self.pr.x0;
        for &(start, end, level) in &plan {
            let u = self.level_value(level);
            let piece = Piece::new(self.pr.a, u, self.pr.alpha, start, x);
            let x_end = piece.x(end);
            segs.push(Segment {
                start,
                end,
                level,
                u,
                x_start: x,
                x_end,
                p_start: 0.0,
                p_end: 0.0,
                piece,
            });
            x = x_end;
        }
        let mut p = 0.0;
        for s in segs.iter_mut().rev() {
            s.p_end = p;
            s.p_start = s.piece.p(s.start, s.end, p);
            p = s.p_start;
        }
        self.check(&segs)?;
        Ok(segs)
    }

    fn check(&self, segs: &[Segment]) -> Result<(), String> {
        let alpha = self.pr.alpha;
        let tol = SURFACE_TOL * alpha.max(1.0);
        for (k, s) in segs.iter().enumerate() {
            for i in 0..=CHECK_POINTS {
                let t = s.start + (s.end - s.start) * i as f64 / CHECK_POINTS as f64;
                let (x, p) = (s.x(t), s.p(t));
                if !(x.is_finite() && p.is_finite()) {
                    return Err(format!("non-finite path on segment {k} at t = {t}"));
                }
                let v = x * p - alpha;
                let ok = match s.level {
                    Level::Zero => v <= tol,
                    Level::Saturated => v >= -tol,
                    Level::Singular => {
                        (x - self.sqrt_alpha).abs() <= tol && (p - self.sqrt_alpha).abs() <= tol
                    }
                };
                if !ok {
                    return Err(format!(
                        "segment {k} ({:?}) violates the minimum condition at t = {t}: x p − α = {v:e}",
                        s.level
                    ));
                }
            }
            if k > 0 && (s.x_start * s.p_start - alpha).abs() > tol {
                return Err(format!("switch {k} is off the switching surface"));
            }
        }
        Ok(())
    }

    fn cost(&self, segs: &[Segment]) -> CostBreakdown {
        let mut mse = 0.0;
        let mut mi = 0.0;
        for s in segs {
            let ix = s.integral_x();
            mse += ix;
            mi += 0.5 * s.u * ix;
        }
        CostBreakdown {
            mse_integral: mse,
            mi,
            cost: mse + 2.0 * self.pr.alpha * mi,
        }
    }

    /// Cheapest valid candidate among several.
    fn best(&self, candidates: impl IntoIterator<Item = Result<Vec<Segment>, String>>) -> Result<Vec<Segment>, String> {
        let mut best: Option<(f64, Vec<Segment>)> = None;
        let mut last_err = String::from("no candidate switch times");
        for c in candidates {
            match c {
                Ok(segs) => {
                    let cost = self.cost(&segs).cost;
                    if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                        best = Some((cost, segs));
                    }
                }
                Err(e) => last_err = e,
            }
        }
        best.map(|(_, s)| s).ok_or(last_err)
    }

    /// Downward crossings of `x̂ p̄ = α`.
    fn saturated_exits(&self) -> Vec<f64> {
        let (t0, t1) = (self.pr.t0, self.pr.t1);
        find_roots(|t| Some(self.xhat(t) * self.pbar(t) - self.pr.alpha), t0, t1, SAMPLES)
            .into_iter()
            .filter(|r| r.downward)
            .map(|r| r.t)
            .collect()
    }

    fn solve_a(&self) -> Result<(Subcase, Vec<Segment>), ScalarError> {
        let x0p = self.pr.x0 * self.pbar(self.pr.t0);
        if x0p <= self.pr.alpha {
            let segs = self.candidate(&[], &[Level::Zero]).map_err(ScalarError::NoSubcaseMatch)?;
            return Ok((Subcase::A1, segs));
        }
        let exits = self.saturated_exits();
        if exits.is_empty() {
            return Err(ScalarError::RootBracketFailure("x̂ p̄ = α has no downward crossing".into()));
        }
        let segs = self
            .best(exits.iter().map(|&t| self.candidate(&[t], &[Level::Saturated, Level::Zero])))
            .map_err(ScalarError::NoSubcaseMatch)?;
        Ok((Subcase::A2, segs))
    }

    fn solve_b(&self) -> Result<(Subcase, Vec<Segment>), ScalarError> {
        let pr = self.pr;
        let x0p = pr.x0 * self.pbar(pr.t0);
        let no_switch = |tag| {
            self.candidate(&[], &[Level::Zero])
                .map(|s| (tag, s))
                .map_err(ScalarError::NoSubcaseMatch)
        };
        if self.xbar(pr.t1) <= pr.x_k() {
            return no_switch(Subcase::B1);
        }
        if x0p < pr.alpha && pr.x0 > self.sqrt_alpha {
            return no_switch(Subcase::B2);
        }
        let t2 = pr.t_double_prime();
        if pr.x0 <= self.sqrt_alpha {
            // The u = 0 arc from x0 reaches √α with x p still below α, so the
            // dwell construction applies whatever the sign of x0 p̄(t0) − α.
            let a2 = 2.0 * pr.a;
            let t1_ = pr.t0 + ((a2 * self.sqrt_alpha + 1.0) / (a2 * pr.x0 + 1.0)).ln() / a2;
            let segs = self
                .candidate(&[t1_, t2], &[Level::Zero, Level::Singular, Level::Zero])
                .map_err(ScalarError::NoSubcaseMatch)?;
            return Ok((Subcase::B3, segs));
        }
        let b4 = self.best(
            self.saturated_exits()
                .into_iter()
                .map(|t| self.candidate(&[t], &[Level::Saturated, Level::Zero])),
        );
        if let Ok(segs) = b4 {
            return Ok((Subcase::B4, segs));
        }
        // x̂ falls to √α at t', then dwells until t''.
        let g = self.gamma_from(pr.t0, pr.x0);
        let c = (pr.a * pr.a + pr.gamma).sqrt();
        let (xp, xm) = (1.0 / (c - pr.a), -(c - pr.a) / pr.gamma);
        if xp >= self.sqrt_alpha {
            return Err(ScalarError::NoSubcaseMatch(
                "saturated arc never reaches √α and no single switch is consistent".into(),
            ));
        }
        let w0 = (pr.x0 - xp) / (pr.x0 - xm);
        let wt = (self.sqrt_alpha - xp) / (self.sqrt_alpha - xm);
        let t1_ = g.start + (w0 / wt).ln() / (2.0 * c);
        if !(t1_ < t2) {
            return Err(ScalarError::NoSubcaseMatch(format!(
                "saturated arc reaches √α at {t1_}, after the dwell must end ({t2})"
            )));
        }
        let segs = self
            .candidate(&[t1_, t2], &[Level::Saturated, Level::Singular, Level::Zero])
            .map_err(ScalarError::NoSubcaseMatch)?;
        Ok((Subcase::B5, segs))
    }

    fn solve_c(&self) -> Result<(Subcase, Vec<Segment>), ScalarError> {
        let pr = self.pr;
        let x0p = pr.x0 * self.pbar(pr.t0);
        let no_switch = |tag| {
            self.candidate(&[], &[Level::Zero])
                .map(|s| (tag, s))
                .map_err(ScalarError::NoSubcaseMatch)
        };
        if self.xbar(pr.t1) <= pr.x_k() {
            return no_switch(Subcase::C1);
        }
        if x0p < pr.alpha && pr.x0 > self.sqrt_alpha {
            return no_switch(Subcase::C2);
        }
        let c3 = self.best(self.saturated_exits().into_iter().map(|t| {
            let segs = self.candidate(&[t], &[Level::Saturated, Level::Zero])?;
            if segs.len() == 2 && pr.x0 * segs[0].p_start > pr.alpha {
                Ok(segs)
            } else {
                Err(format!("x0 p(t0) ≤ α for switch at {t}"))
            }
        }));
        if let Ok(segs) = c3 {
            return Ok((Subcase::C3, segs));
        }
        let c4 = self.solve_c4()?;
        Ok((Subcase::C4, c4))
    }

    /// Last downward crossing of `x_γ p̄ = α` for a saturated arc entered at `t1_`.
    fn saturated_leave(&self, t1_: f64) -> Option<f64> {
        let pr = self.pr;
        let g = self.gamma_from(t1_, self.xbar(t1_));
        find_roots(|t| Some(g.x(t) * self.pbar(t) - pr.alpha), t1_, pr.t1, SAMPLES)
            .into_iter()
            .filter(|r| r.downward && r.t > t1_)
            .map(|r| r.t)
            .next_back()
    }

    /// Mismatch `x̄(t') p(t') − α` after propagating the costate back through
    /// the saturated arc `[t', t'']`.
    fn c4_residual(&self, t1_: f64) -> Option<(f64, f64)> {
        let t2 = self.saturated_leave(t1_)?;
        let x1 = self.xbar(t1_);
        let g = self.gamma_from(t1_, x1);
        let p1 = g.p(t1_, t2, self.pbar(t2));
        Some((x1 * p1 - self.pr.alpha, t2))
    }

    fn solve_c4(&self) -> Result<Vec<Segment>, ScalarError> {
        let pr = self.pr;
        let span = pr.t1 - pr.t0;
        let hi = pr.t1 - 1e-9 * span;
        let roots = find_roots(|t| self.c4_residual(t).map(|r| r.0), pr.t0, hi, SAMPLES);
        if roots.is_empty() {
            return Err(ScalarError::RootBracketFailure(
                "two-switch continuity residual has no sign change".into(),
            ));
        }
        self.best(roots.iter().map(|r| {
            let (_, t2) = self.c4_residual(r.t).ok_or("inner switch lost at refined root")?;
            let segs = self.candidate(&[r.t, t2], &[Level::Zero, Level::Saturated, Level::Zero])?;
            if pr.x0 * segs[0].p_start <= pr.alpha + SURFACE_TOL * pr.alpha.max(1.0) {
                Ok(segs)
            } else {
                Err(format!("x0 p(t0) > α for switches ({}, {t2})", r.t))
            }
        }))
        .map_err(ScalarError::NoSubcaseMatch)
    }
}

/// Optimal piecewise-constant control of a scalar problem.
pub fn solve_scalar(problem: &ScalarProblem) -> Result<ScalarSolution, ScalarError> {
    let case = classify_case(problem);
    let ctx = Ctx::new(problem);
    let (subcase, segments) = match case.label {
        Case::A => ctx.solve_a()?,
        Case::B => ctx.solve_b()?,
        Case::C => ctx.solve_c()?,
    };
    let cost = ctx.cost(&segments);
    let switch_times = segments[1..].iter().map(|s| s.start).collect();
    let mut notes = Vec::new();
    if segments.iter().any(|s| s.level == Level::Singular) {
        notes.push(
            "singular arc: entering and leaving (√α, √α) at other times also satisfies the canonical \
             equations; the dwell interval reported here is [t', t'']"
                .to_string(),
        );
    }
    if problem.x0 == 0.0 {
        notes.push("x0 = 0 is outside the positivity hypothesis; formulas applied unchanged".to_string());
    }
    Ok(ScalarSolution {
        problem: *problem,
        case,
        subcase,
        switch_times,
        u_star: (case.label == Case::B).then_some(ctx.u_star),
        segments,
        cost,
        notes,
    })
}
