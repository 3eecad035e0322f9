//! Sampled bracketing plus bisection/secant refinement for switch-time equations.

/// Samples used to bracket sign changes.
pub const SAMPLES: usize = 1024;
/// Target residual on switch-time equations.
pub const RESIDUAL_TOL: f64 = 1e-12;
/// Largest residual accepted once the bracket has collapsed to rounding level.
const FALLBACK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub t: f64,
    /// The function decreases through zero.
    pub downward: bool,
}

/// All sign changes of `f` on `[lo, hi]`, in increasing order.
///
/// `f` may be undefined (`None`) at some points; brackets only join
/// neighbouring samples where it is defined.
pub fn find_roots(f: impl Fn(f64) -> Option<f64>, lo: f64, hi: f64, samples: usize) -> Vec<Root> {
    let step = (hi - lo) / samples as f64;
    let grid: Vec<(f64, Option<f64>)> = (0..=samples)
        .map(|i| {
            let t = if i == samples { hi } else { lo + i as f64 * step };
            (t, f(t).filter(|v| v.is_finite()))
        })
        .collect();
    let mut out = Vec::new();
    if let Some((t, Some(v))) = grid.first() {
        if *v == 0.0 {
            let downward = matches!(grid.get(1), Some((_, Some(n))) if *n < 0.0);
            out.push(Root { t: *t, downward });
        }
    }
    for pair in grid.windows(2) {
        let ((ta, fa), (tb, fb)) = (pair[0], pair[1]);
        let (Some(fa), Some(fb)) = (fa, fb) else { continue };
        if fa == 0.0 {
            continue;
        }
        if fb == 0.0 {
            out.push(Root { t: tb, downward: fa > 0.0 });
        } else if (fa > 0.0) != (fb > 0.0) {
            let g = |t: f64| f(t).unwrap_or(f64::NAN);
            if let Some(t) = refine(g, ta, tb, fa, fb) {
                out.push(Root { t, downward: fa > 0.0 });
            }
        }
    }
    out
}

/// Refines a bracket `[a, b]` with `f(a) f(b) < 0`.
///
/// Secant steps are taken when they land inside the bracket, alternating
/// with bisection so the bracket always shrinks geometrically.
pub fn refine(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64) -> Option<f64> {
    let mut best = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    for iter in 0..400 {
        if best.1.abs() <= RESIDUAL_TOL {
            return Some(best.0);
        }
        let secant = b - fb * (b - a) / (fb - fa);
        let mid = 0.5 * (a + b);
        let t = if iter % 2 == 0 && secant > a && secant < b { secant } else { mid };
        if t <= a || t >= b {
            break;
        }
        let ft = f(t);
        if !ft.is_finite() {
            return None;
        }
        if ft.abs() < best.1.abs() {
            best = (t, ft);
        }
        if ft == 0.0 {
            return Some(t);
        }
        if (ft > 0.0) == (fa > 0.0) {
            a = t;
            fa = ft;
        } else {
            b = t;
            fb = ft;
        }
    }
    (best.1.abs() <= FALLBACK_TOL).then_some(best.0)
}
