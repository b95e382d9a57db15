//! Closed-form solution of the linear-quadratic benchmark: F = 0,
//! F_T = (w/2)|x|², σ = s₀I. The Riccati coefficient solves dP/ds = P²/λ with
//! P(T) = w, so P(s) = λw / (λ + w(T − s)).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqRiccati {
    pub lambda: f64,
    pub terminal_weight: f64,
    pub sigma: f64,
    pub dim: usize,
    pub t_end: f64,
}

impl LqRiccati {
    pub fn p(&self, s: f64) -> f64 {
        let w = self.terminal_weight;
        self.lambda * w / (self.lambda + w * (self.t_end - s))
    }

    /// dP/ds.
    pub fn p_dot(&self, s: f64) -> f64 {
        self.p(s).powi(2) / self.lambda
    }

    /// ∫_t^T P(s) ds.
    pub fn p_integral(&self, t: f64) -> f64 {
        let w = self.terminal_weight;
        if w == 0.0 {
            return 0.0;
        }
        self.lambda * ((self.lambda + w * (self.t_end - t)) / self.lambda).ln()
    }

    /// V(X, t) for an ensemble with ‖X‖² = `x_norm2`.
    pub fn value(&self, t: f64, x_norm2: f64) -> f64 {
        0.5 * self.p(t) * x_norm2 + 0.5 * self.dim as f64 * self.sigma * self.sigma * self.p_integral(t)
    }

    /// u(x, s) = ½P(s)|x|² + ½ n s₀² ∫_s^T P: the HJB potential of the same problem.
    pub fn potential(&self, x: f64, s: f64) -> f64 {
        self.value(s, x * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn riccati_ode_and_endpoints() {
        let r = LqRiccati { lambda: 1.0, terminal_weight: 1.0, sigma: 0.5, dim: 1, t_end: 1.0 };
        assert_eq!(r.p(1.0), 1.0);
        assert_eq!(r.p(0.0), 0.5);
        let h = 1e-5;
        for s in [0.1, 0.5, 0.9] {
            let fd = (r.p(s + h) - r.p(s - h)) / (2.0 * h);
            assert!((fd - r.p_dot(s)).abs() < 1e-9);
        }
        // Simpson check of the integral.
        let n = 2000;
        let hs = 1.0 / n as f64;
        let mut simp = r.p(0.0) + r.p(1.0);
        for i in 1..n {
            simp += if i % 2 == 1 { 4.0 } else { 2.0 } * r.p(i as f64 * hs);
        }
        simp *= hs / 3.0;
        assert!((simp - r.p_integral(0.0)).abs() < 1e-12);
        assert!((r.p_integral(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
