//! Closed-form state and costate of the scalar canonical equations under a
//! constant control:
//!
//! ```text
//! ẋ = 2 a x − u x² + 1
//! ṗ = 2 u x p − 2 a p − 1 − α u
//! ```
//!
//! For `u > 0` the state is written through the cross-ratio
//! `w = (x − x₊)/(x − x₋)`, which decays as `e^{−2cτ}` with `c = √(a² + u)`.
//! This form never overflows, unlike the `k₃ e^{2ct}` parametrization that
//! [`region3_state_exponential`] keeps for cross-checking.

/// Controls below this are treated as zero.
const U_FLOOR: f64 = 1e-14;

/// One constant-control piece starting at `(start, x_start)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub a: f64,
    pub u: f64,
    pub alpha: f64,
    pub start: f64,
    pub x_start: f64,
}

impl Piece {
    pub fn new(a: f64, u: f64, alpha: f64, start: f64, x_start: f64) -> Self {
        Self {
            a,
            u,
            alpha,
            start,
            x_start,
        }
    }

    fn saturated(&self) -> bool {
        self.u > U_FLOOR
    }

    /// `(c, x₊, x₋)` for `u > 0`.
    fn roots(&self) -> (f64, f64, f64) {
        let c = (self.a * self.a + self.u).sqrt();
        // x₊ = (a + c)/u and x₋ = (a − c)/u without cancellation.
        (c, 1.0 / (c - self.a), -(c - self.a) / self.u)
    }

    fn w(&self, t: f64) -> f64 {
        let (c, xp, xm) = self.roots();
        let w0 = (self.x_start - xp) / (self.x_start - xm);
        w0 * (-2.0 * c * (t - self.start)).exp()
    }

    pub fn x(&self, t: f64) -> f64 {
        let tau = t - self.start;
        if self.saturated() {
            let (_, xp, xm) = self.roots();
            let w = self.w(t);
            (xp - w * xm) / (1.0 - w)
        } else {
            let a2 = 2.0 * self.a;
            self.x_start * (a2 * tau).exp() + (a2 * tau).exp_m1() / a2
        }
    }

    /// `∫_start^t x ds`.
    pub fn integral_x(&self, t: f64) -> f64 {
        let tau = t - self.start;
        if self.saturated() {
            let (_, xp, _) = self.roots();
            let (w0, w1) = (self.w(self.start), self.w(t));
            xp * tau + ((1.0 - w1) / (1.0 - w0)).ln() / self.u
        } else {
            let a2 = 2.0 * self.a;
            ((a2 * self.x_start + 1.0) * (a2 * tau).exp_m1() / a2 - tau) / a2
        }
    }

    /// Costate at `t` given `p(t_ref) = p_ref`.
    pub fn p(&self, t: f64, t_ref: f64, p_ref: f64) -> f64 {
        if self.saturated() {
            let (c, _, _) = self.roots();
            let particular = |w: f64| (1.0 + self.alpha * self.u) * (1.0 - w) / (2.0 * c);
            let (w, w_ref) = (self.w(t), self.w(t_ref));
            let ratio = ((1.0 - w) / (1.0 - w_ref)).powi(2) * (2.0 * c * (t - t_ref)).exp();
            particular(w) + (p_ref - particular(w_ref)) * ratio
        } else {
            let a2 = 2.0 * self.a;
            -1.0 / a2 + (p_ref + 1.0 / a2) * (-a2 * (t - t_ref)).exp()
        }
    }
}

/// Unswitched `u = 0` solution with `x(t0) = x0` and `p(t1) = 0`, evaluated at `t`.
pub fn region1_solution(a: f64, x0: f64, t0: f64, t1: f64, t: f64) -> (f64, f64) {
    let x = ((2.0 * a * x0 + 1.0) * (2.0 * a * (t - t0)).exp() - 1.0) / (2.0 * a);
    let p = ((-2.0 * a * (t - t1)).exp() - 1.0) / (2.0 * a);
    (x, p)
}

/// Saturated (`u = γ`) state from `x(t0) = x0`.
pub fn region3_state(a: f64, gamma: f64, x0: f64, t0: f64, t: f64) -> f64 {
    Piece::new(a, gamma, 0.0, t0, x0).x(t)
}

/// The same trajectory in the `k₃ e^{2ct}` form; loses precision for large `c t`.
pub fn region3_state_exponential(a: f64, gamma: f64, x0: f64, t0: f64, t: f64) -> f64 {
    let c = (a * a + gamma).sqrt();
    let den = c + a - x0 * gamma;
    if den == 0.0 {
        return (a + c) / gamma;
    }
    let k3 = (c - a + x0 * gamma) / den * (-2.0 * c * t0).exp();
    (a + c - 2.0 * c / (k3 * (2.0 * c * t).exp() + 1.0)) / gamma
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rhs_x(p: &Piece, x: f64) -> f64 {
        2.0 * p.a * x - p.u * x * x + 1.0
    }

    fn rhs_p(p: &Piece, x: f64, q: f64) -> f64 {
        2.0 * p.u * x * q - 2.0 * p.a * q - 1.0 - p.alpha * p.u
    }

    #[test]
    fn region1_examples() {
        let (x, p) = region1_solution(-0.5, 2.0, 0.0, 3.0, 0.0);
        assert_eq!(x, 2.0);
        assert!(p > 0.0);
        let (_, p) = region1_solution(-0.5, 2.0, 0.0, 3.0, 3.0);
        assert_eq!(p, 0.0);
        let (x, _) = region1_solution(-0.5, 2.0, 0.0, 3.0, 2f64.ln());
        assert!((x - 1.5).abs() < 1e-14);
        let piece = Piece::new(-0.5, 0.0, 0.3, 0.0, 2.0);
        assert!((piece.x(2f64.ln()) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn region3_limits_and_equilibrium() {
        let (a, g) = (-0.595, 1.0);
        assert!((region3_state(a, g, 2.0, 0.0, 40.0) - 0.568626).abs() < 1e-6);
        let xe = (a + (a * a + g).sqrt()) / g;
        for t in [0.0, 0.7, 5.0, 100.0] {
            assert!((region3_state(a, g, xe, 0.0, t) - xe).abs() < 1e-15);
            assert!((region3_state_exponential(a, g, xe, 0.0, t) - xe).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_and_exponential_forms_agree() {
        for &(a, g, x0, t0) in &[(-0.595, 1.0, 2.0, 0.0), (-1.2, 0.3, 0.1, 1.5), (-0.2, 4.0, 0.0, -2.0)] {
            for k in 0..50 {
                let t = t0 + 0.1 * k as f64;
                let s = region3_state(a, g, x0, t0, t);
                let q = region3_state_exponential(a, g, x0, t0, t);
                assert!((s - q).abs() < 1e-10 * (1.0 + s.abs()), "{s} vs {q}");
            }
        }
    }

    #[test]
    fn ode_residuals_by_finite_differences() {
        let h = 1e-5;
        for &(u, x0) in &[(0.0, 0.3), (1.0, 2.0), (0.376023, 0.1), (2.5, 0.0)] {
            let piece = Piece::new(-0.595, u, 0.476, 0.2, x0);
            let (t_ref, p_ref) = (3.0, 0.4);
            for k in 1..30 {
                let t = 0.2 + 0.1 * k as f64;
                let dx = (piece.x(t + h) - piece.x(t - h)) / (2.0 * h);
                assert!((dx - rhs_x(&piece, piece.x(t))).abs() < 1e-6);
                let dp = (piece.p(t + h, t_ref, p_ref) - piece.p(t - h, t_ref, p_ref)) / (2.0 * h);
                let r = rhs_p(&piece, piece.x(t), piece.p(t, t_ref, p_ref));
                assert!((dp - r).abs() < 1e-6, "u={u} t={t}: {dp} vs {r}");
            }
            assert!((piece.p(t_ref, t_ref, p_ref) - p_ref).abs() < 1e-14);
        }
    }

    #[test]
    fn integrals_match_quadrature() {
        for &(u, x0) in &[(0.0, 0.3), (1.0, 2.0), (0.05, 3.0)] {
            let piece = Piece::new(-0.7, u, 0.2, 1.0, x0);
            let n = 2000;
            let h = 2.0 / n as f64;
            let simpson: f64 = (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * piece.x(1.0 + i as f64 * h)
                })
                .sum::<f64>()
                * h
                / 3.0;
            assert!((piece.integral_x(3.0) - simpson).abs() < 1e-11);
        }
    }
}
