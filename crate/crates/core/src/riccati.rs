//! Deterministic reference solution of the scalar linear-quadratic
//! mean-field control problem.
//!
//! With the ansatz `Y = eta (X - mean) + p mean`, the coupled system reduces
//! to two scalar Riccati equations
//!
//! ```text
//! eta' = -2 b2 eta + (b3^2/r) eta^2 - (q + qbar),               eta(T) = c + cbar
//! p'   = -2 (b1+b2) p + (b3^2/r) p^2 - (q + qbar (1-s)^2),      p(T) = c + cbar (1-s_T)^2
//! ```
//!
//! and linear equations for the mean and the variance of the optimal state:
//!
//! ```text
//! mean' = (b1 + b2 - (b3^2/r) p) mean,    var' = 2 (b2 - (b3^2/r) eta) var + sigma0^2.
//! ```
//!
//! In the decomposition `Y = eta X + psi mean + chi` this gives
//! `psi = p - eta` and `chi = 0`.

use crate::model::LqParams;
use crate::scalar::Real;

/// Riccati and moment trajectories on a uniform grid, all in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqOracle {
    pub params: LqParams<f64>,
    dt: f64,
    eta: Vec<f64>,
    p: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    cost: f64,
}

/// Grid used by [`LqOracle::new`].
pub const DEFAULT_ORACLE_STEPS: usize = 4000;

fn rk4_step(y: f64, h: f64, k: impl Fn(f64, usize) -> f64, at: [usize; 3]) -> f64 {
    let k1 = k(y, at[0]);
    let k2 = k(y + 0.5 * h * k1, at[1]);
    let k3 = k(y + 0.5 * h * k2, at[1]);
    let k4 = k(y + h * k3, at[2]);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

impl LqOracle {
    pub fn new<T: Real>(params: &LqParams<T>) -> Self {
        Self::with_steps(params, DEFAULT_ORACLE_STEPS)
    }

    /// Integrates with classical Runge-Kutta on `steps` intervals. The
    /// backward sweep runs on the half-step grid so the forward sweep has
    /// the gains at its stage times.
    pub fn with_steps<T: Real>(params: &LqParams<T>, steps: usize) -> Self {
        assert!(steps >= 1, "oracle needs at least one step");
        let f = |v: T| v.as_f64();
        let p = LqParams {
            q: f(params.q),
            qbar: f(params.qbar),
            s: f(params.s),
            r: f(params.r),
            c: f(params.c),
            cbar: f(params.cbar),
            s_t: f(params.s_t),
            b1: f(params.b1),
            b2: f(params.b2),
            b3: f(params.b3),
            sigma0: f(params.sigma0),
            horizon: f(params.horizon),
            x0: f(params.x0),
        };
        let fine = 2 * steps;
        let h = p.horizon / fine as f64;
        let k = p.b3 * p.b3 / p.r;
        let mut eta = vec![0.0; fine + 1];
        let mut gain = vec![0.0; fine + 1];
        eta[fine] = p.c + p.cbar;
        gain[fine] = p.c + p.cbar * (1.0 - p.s_t) * (1.0 - p.s_t);
        let qe = p.q + p.qbar;
        let qp = p.q + p.qbar * (1.0 - p.s) * (1.0 - p.s);
        // Autonomous equations, integrated in reversed time.
        let eta_rev = |e: f64, _: usize| -(-2.0 * p.b2 * e + k * e * e - qe);
        let p_rev = |g: f64, _: usize| -(-2.0 * (p.b1 + p.b2) * g + k * g * g - qp);
        for n in (0..fine).rev() {
            eta[n] = rk4_step(eta[n + 1], h, eta_rev, [0, 0, 0]);
            gain[n] = rk4_step(gain[n + 1], h, p_rev, [0, 0, 0]);
        }

        let mut mean = vec![0.0; steps + 1];
        let mut var = vec![0.0; steps + 1];
        mean[0] = p.x0;
        let hh = 2.0 * h;
        let running = |m: f64, v: f64, i: usize| -> f64 {
            let (e, g) = (eta[i], gain[i]);
            let state =
                0.5 * p.q * (m * m + v) + 0.5 * p.qbar * (v + (1.0 - p.s) * (1.0 - p.s) * m * m);
            let control = 0.5 * p.r * (p.b3 / p.r) * (p.b3 / p.r) * (g * g * m * m + e * e * v);
            state + control
        };
        let mut cost = 0.0;
        for n in 0..steps {
            let idx = [2 * n, 2 * n + 1, 2 * n + 2];
            let mean_rhs = |m: f64, i: usize| (p.b1 + p.b2 - k * gain[i]) * m;
            let var_rhs = |v: f64, i: usize| 2.0 * (p.b2 - k * eta[i]) * v + p.sigma0 * p.sigma0;
            // Mean and variance advance jointly with the cost integrand.
            let (m0, v0) = (mean[n], var[n]);
            let km1 = mean_rhs(m0, idx[0]);
            let kv1 = var_rhs(v0, idx[0]);
            let kc1 = running(m0, v0, idx[0]);
            let (m2, v2) = (m0 + 0.5 * hh * km1, v0 + 0.5 * hh * kv1);
            let km2 = mean_rhs(m2, idx[1]);
            let kv2 = var_rhs(v2, idx[1]);
            let kc2 = running(m2, v2, idx[1]);
            let (m3, v3) = (m0 + 0.5 * hh * km2, v0 + 0.5 * hh * kv2);
            let km3 = mean_rhs(m3, idx[1]);
            let kv3 = var_rhs(v3, idx[1]);
            let kc3 = running(m3, v3, idx[1]);
            let (m4, v4) = (m0 + hh * km3, v0 + hh * kv3);
            let km4 = mean_rhs(m4, idx[2]);
            let kv4 = var_rhs(v4, idx[2]);
            let kc4 = running(m4, v4, idx[2]);
            mean[n + 1] = m0 + hh / 6.0 * (km1 + 2.0 * km2 + 2.0 * km3 + km4);
            var[n + 1] = v0 + hh / 6.0 * (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4);
            cost += hh / 6.0 * (kc1 + 2.0 * kc2 + 2.0 * kc3 + kc4);
        }
        let (mt, vt) = (mean[steps], var[steps]);
        cost += 0.5 * p.c * (mt * mt + vt)
            + 0.5 * p.cbar * (vt + (1.0 - p.s_t) * (1.0 - p.s_t) * mt * mt);

        let eta = eta.iter().step_by(2).copied().collect();
        let gain = gain.iter().step_by(2).copied().collect();
        Self {
            params: p,
            dt: hh,
            eta,
            p: gain,
            mean,
            var,
            cost,
        }
    }

    fn interp(&self, v: &[f64], t: f64) -> f64 {
        let last = v.len() - 1;
        let u = (t / self.dt).clamp(0.0, last as f64);
        let i = (u.floor() as usize).min(last.saturating_sub(1));
        let w = u - i as f64;
        if last == 0 {
            return v[0];
        }
        v[i] * (1.0 - w) + v[i + 1] * w
    }

    /// Optimal cost.
    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// `Y_0 = p(0) x0` for the deterministic initial condition.
    pub fn y0(&self) -> f64 {
        self.p[0] * self.params.x0
    }

    /// Slope of the decoupling field in the state.
    pub fn eta(&self, t: f64) -> f64 {
        self.interp(&self.eta, t)
    }

    /// Gain of the mean equation.
    pub fn mean_gain(&self, t: f64) -> f64 {
        self.interp(&self.p, t)
    }

    /// Coefficient of the mean in the decoupling field.
    pub fn psi(&self, t: f64) -> f64 {
        self.mean_gain(t) - self.eta(t)
    }

    /// Constant term of the decoupling field (zero without a constant drift).
    pub fn chi(&self, _t: f64) -> f64 {
        0.0
    }

    pub fn mean(&self, t: f64) -> f64 {
        self.interp(&self.mean, t)
    }

    pub fn variance(&self, t: f64) -> f64 {
        self.interp(&self.var, t)
    }

    /// Decoupling field `v(t, x) = eta x + psi mean + chi`.
    pub fn field(&self, t: f64, x: f64) -> f64 {
        self.eta(t) * x + self.psi(t) * self.mean(t) + self.chi(t)
    }

    /// Supremum of `|eta|` over the horizon.
    pub fn sup_abs_eta(&self) -> f64 {
        self.eta.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_values() {
        let o = LqOracle::new(&LqParams::<f64>::benchmark());
        assert!((o.cost() - 0.838_025_441_660_709_5).abs() < 1e-10);
        assert!((o.y0() - 1.530_329_756_621_533_3).abs() < 1e-10);
        assert_eq!(o.variance(0.0), 0.0);
        assert_eq!(o.mean(0.0), 1.0);
    }

    #[test]
    fn terminal_conditions_hold() {
        let p = LqParams::<f64> {
            cbar: 0.7,
            s_t: 0.4,
            ..LqParams::benchmark()
        };
        let o = LqOracle::new(&p);
        assert!((o.eta(1.0) - 1.7).abs() < 1e-14);
        assert!((o.mean_gain(1.0) - (1.0 + 0.7 * 0.36)).abs() < 1e-14);
    }

    #[test]
    fn uncontrolled_noise_only_problem() {
        // b3 = 0 decouples control: cost is (c/2)(x0^2 + sigma^2 T) with q = qbar = 0.
        let p = LqParams::<f64> {
            q: 0.0,
            qbar: 0.0,
            b2: 0.0,
            b3: 0.0,
            ..LqParams::benchmark()
        };
        let o = LqOracle::new(&p);
        assert!((o.cost() - 0.5 * (1.0 + 0.09)).abs() < 1e-12);
    }

    #[test]
    fn converges_with_the_grid() {
        let p = LqParams::<f64>::benchmark();
        let coarse = LqOracle::with_steps(&p, 50);
        let fine = LqOracle::with_steps(&p, 5000);
        assert!((coarse.cost() - fine.cost()).abs() < 1e-7);
        assert!((coarse.y0() - fine.y0()).abs() < 1e-7);
    }
}
