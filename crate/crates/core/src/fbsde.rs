//! The coupled mean-field forward-backward system: the decoupled base solve,
//! the Picard map of the continuation argument, and the continuation driver
//! in the coupling strength `gamma`.
//!
//! A solution of `E(gamma, xi, I)` is a fixed point of
//! `Theta -> S0(I + gamma F(Theta))`, where `S0` is the decoupled solve and
//! `F(Theta) = (b, sigma, d_x H + E~ d_mu H, d_x g + E~ d_mu g)` evaluated
//! along `Theta`. At a fixed point the backward step reads
//! `Y_n = E[Y_{n+1} | X_n] + (d_x H + E~ d_mu H)(Theta_n) dt`, so the driver
//! is implicit in `Y_n`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{
    adjoint_driver, dalpha_hamiltonian_at, minimize_alpha_into, terminal_adjoint, HamiltonianPoint,
    NewtonConfig,
};
use crate::maxprinciple::{
    euler_update, generate_noise, particle_costs, regress_step, AdjointPaths, ControlPaths,
    StatePaths, TimeGrid, DEFAULT_BASIS_DEGREE,
};
use crate::measure::ParticleCloud;
use crate::model::{DynamicsAt, ModelSpec};
use crate::noise::NoiseBank;
use crate::paths::PathArray;
use crate::regression::LinearFit;
use crate::scalar::{dot, mean_and_se, Real, PAR_CHUNK};
use rayon::prelude::*;

/// Exogenous input `I = (I^b, I^sigma, I^f, I^g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputProcess<T> {
    /// `Nt x M x d`.
    pub i_b: PathArray<T>,
    /// `Nt x M x (d m)`, row-major `d x m`.
    pub i_sigma: PathArray<T>,
    /// `Nt x M x d`.
    pub i_f: PathArray<T>,
    /// `1 x M x d`.
    pub i_g: PathArray<T>,
}

impl<T: Real> InputProcess<T> {
    pub fn zeros(steps: usize, particles: usize, d: usize, m: usize) -> Self {
        Self {
            i_b: PathArray::zeros(steps, particles, d),
            i_sigma: PathArray::zeros(steps, particles, d * m),
            i_f: PathArray::zeros(steps, particles, d),
            i_g: PathArray::zeros(1, particles, d),
        }
    }

    pub fn particles(&self) -> usize {
        self.i_b.particles()
    }

    pub fn steps(&self) -> usize {
        self.i_b.steps()
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        let pairs = [
            (&mut self.i_b, &other.i_b),
            (&mut self.i_sigma, &other.i_sigma),
            (&mut self.i_f, &other.i_f),
            (&mut self.i_g, &other.i_g),
        ];
        for (a, b) in pairs {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x = *x + s * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.i_b.is_finite()
            && self.i_sigma.is_finite()
            && self.i_f.is_finite()
            && self.i_g.is_finite()
    }
}

/// `E[|I^g|^2 + sum_n (|I^b_n|^2 + |I^sigma_n|^2 + |I^f_n|^2) dt]^{1/2}`.
pub fn i_norm<T: Real>(input: &InputProcess<T>, dt: T) -> T {
    let mm = input.particles();
    let mut total = T::zero();
    for i in 0..mm {
        let mut acc = dot(input.i_g.at(0, i), input.i_g.at(0, i));
        for n in 0..input.steps() {
            for a in [&input.i_b, &input.i_sigma, &input.i_f] {
                let v = a.at(n, i);
                acc = acc + dot(v, v) * dt;
            }
        }
        total = total + acc;
    }
    (total / T::from_usize_lossy(mm)).sqrt()
}

/// Cost and initial adjoint estimates attached to a full solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary<T> {
    pub j: T,
    pub j_se: T,
    pub y0: Vec<T>,
    pub y0_se: Vec<T>,
}

/// One accepted continuation level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub gamma: f64,
    pub step: f64,
    pub omega: f64,
    pub iterations: usize,
    pub final_change: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Diagnostics {
    pub levels: Vec<LevelRecord>,
    /// Number of decoupled base solves performed.
    pub base_solves: usize,
    /// Relative fixed-point residuals of the last level.
    pub residual_trace: Vec<f64>,
    /// Step halvings and relaxation halvings triggered along the way.
    pub step_halvings: usize,
    pub omega_halvings: usize,
}

/// Extended solution `Theta = (X, law of X, Y, Z, alpha)` on the particle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeSolution<T> {
    pub states: StatePaths<T>,
    pub adjoint: AdjointPaths<T>,
    pub control: ControlPaths<T>,
    pub gamma: T,
    pub diagnostics: Diagnostics,
    pub summary: Option<CostSummary<T>>,
}

impl<T: Real> FbsdeSolution<T> {
    pub fn particles(&self) -> usize {
        self.states.particles()
    }
}

/// How the Picard map is evaluated inside the continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolve {
    /// One base solve per Picard step: the level iteration becomes
    /// `Theta -> S0(I + gamma F(Theta))`, warm-started from the previous level.
    Flat,
    /// The Picard map solves `E(gamma_-, xi, I')` exactly by recursion.
    /// Cost grows geometrically with the number of levels.
    Nested,
}

/// Update rule of the flat engine. Both have the solutions of
/// `E(gamma, xi, I)` as fixed points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// `Theta -> S0(I + gamma F(Theta))`.
    Jacobi,
    /// Forward pass on the new paths with a regression-predicted adjoint,
    /// then the backward pass on the new paths.
    Predictive,
}

/// Starting point of the Picard iteration at each level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardInit {
    /// The solution of the previous level.
    Previous,
    /// Paths frozen at the initial condition with zero adjoint and control.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContinuationConfig<T> {
    pub delta0: T,
    /// Relative fixed-point residual accepted at the target level.
    pub picard_tol: T,
    /// Relative residual accepted at intermediate levels.
    pub level_tol: T,
    pub max_picard: usize,
    /// Initial relaxation weight in `(0, 1]`, halved on divergence.
    pub omega: T,
    /// Smallest continuation step before giving up.
    pub min_delta: T,
    pub inner: InnerSolve,
    pub sweep: Sweep,
    pub init: PicardInit,
    pub degree: usize,
}

impl<T: Real> Default for ContinuationConfig<T> {
    fn default() -> Self {
        Self {
            delta0: T::lit(0.1),
            picard_tol: T::lit(1e-8).max(T::lit(100.0) * T::epsilon()),
            level_tol: T::lit(1e-3),
            max_picard: 200,
            omega: T::one(),
            min_delta: T::lit(1e-3),
            inner: InnerSolve::Flat,
            sweep: Sweep::Predictive,
            init: PicardInit::Previous,
            degree: DEFAULT_BASIS_DEGREE,
        }
    }
}

impl<T: Real> ContinuationConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 > T::zero() && self.delta0 <= T::one()) {
            return Err(Error::InvalidParameter(format!(
                "delta0 must lie in (0, 1], got {}",
                self.delta0
            )));
        }
        if !(self.omega > T::zero() && self.omega <= T::one()) {
            return Err(Error::InvalidParameter(format!(
                "omega must lie in (0, 1], got {}",
                self.omega
            )));
        }
        if !(self.picard_tol > T::zero()) || !(self.level_tol > T::zero()) {
            return Err(Error::InvalidParameter(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_picard == 0 {
            return Err(Error::InvalidParameter(
                "max_picard must be at least 1".into(),
            ));
        }
        if self.degree > crate::regression::MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "basis degree {} too large",
                self.degree
            )));
        }
        Ok(())
    }
}

/// `E[max_n |X_n|^2 + max_n |Y_n|^2 + sum_n (|Z_n|^2 + |alpha_n|^2) dt]^{1/2}`.
pub fn s_norm<T: Real>(sol: &FbsdeSolution<T>, dt: T) -> T {
    s_norm_parts(
        &sol.states.x,
        &sol.adjoint.y,
        &sol.adjoint.z,
        &sol.control.values,
        dt,
    )
}

/// S-norm of the difference of two solutions on the same grid.
pub fn s_distance<T: Real>(a: &FbsdeSolution<T>, b: &FbsdeSolution<T>, dt: T) -> T {
    let diff = |p: &PathArray<T>, q: &PathArray<T>| {
        let data = p
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(&u, &v)| u - v)
            .collect();
        PathArray::from_vec(p.steps(), p.particles(), p.width(), data)
    };
    s_norm_parts(
        &diff(&a.states.x, &b.states.x),
        &diff(&a.adjoint.y, &b.adjoint.y),
        &diff(&a.adjoint.z, &b.adjoint.z),
        &diff(&a.control.values, &b.control.values),
        dt,
    )
}

fn s_norm_parts<T: Real>(
    x: &PathArray<T>,
    y: &PathArray<T>,
    z: &PathArray<T>,
    a: &PathArray<T>,
    dt: T,
) -> T {
    let mm = x.particles();
    let mut total = T::zero();
    for i in 0..mm {
        let mut sx = T::zero();
        let mut sy = T::zero();
        for n in 0..x.steps() {
            sx = sx.max(dot(x.at(n, i), x.at(n, i)));
            sy = sy.max(dot(y.at(n, i), y.at(n, i)));
        }
        let mut integral = T::zero();
        for n in 0..z.steps() {
            integral = integral + (dot(z.at(n, i), z.at(n, i)) + dot(a.at(n, i), a.at(n, i))) * dt;
        }
        total = total + sx + sy + integral;
    }
    (total / T::from_usize_lossy(mm)).sqrt()
}

/// Everything that stays fixed across the iterations of one solve.
struct Context<'a, T: Real> {
    spec: &'a ModelSpec<T>,
    grid: &'a TimeGrid<T>,
    coeffs: Vec<DynamicsAt<T>>,
    noise: Arc<NoiseBank<T>>,
    xi: Vec<T>,
    degree: usize,
    newton: NewtonConfig<T>,
    base_solves: std::sync::atomic::AtomicUsize,
}

impl<'a, T: Real> Context<'a, T> {
    fn new(
        spec: &'a ModelSpec<T>,
        grid: &'a TimeGrid<T>,
        xi: &ParticleCloud<T>,
        noise: Arc<NoiseBank<T>>,
        degree: usize,
    ) -> Result<Self> {
        if xi.dim() != spec.d {
            return Err(Error::Dimension(format!(
                "initial cloud in R^{}, model in R^{}",
                xi.dim(),
                spec.d
            )));
        }
        if noise.particles() != xi.len()
            || noise.steps() != grid.steps()
            || noise.increments.width() != spec.m
        {
            return Err(Error::Dimension(
                "noise bank does not match the initial cloud and grid".into(),
            ));
        }
        Ok(Self {
            spec,
            grid,
            coeffs: spec.dynamics.sample(&grid.left_times())?,
            noise,
            xi: xi.as_flat().to_vec(),
            degree,
            newton: NewtonConfig::default(),
            base_solves: std::sync::atomic::AtomicUsize::new(0),
        })
    }

    fn particles(&self) -> usize {
        self.xi.len() / self.spec.d
    }

    fn check_input(&self, input: &InputProcess<T>) -> Result<()> {
        let (d, m) = (self.spec.d, self.spec.m);
        let (nt, mm) = (self.grid.steps(), self.particles());
        let ok = |a: &PathArray<T>, s: usize, w: usize| {
            a.steps() == s && a.particles() == mm && a.width() == w
        };
        if ok(&input.i_b, nt, d)
            && ok(&input.i_sigma, nt, d * m)
            && ok(&input.i_f, nt, d)
            && ok(&input.i_g, 1, d)
        {
            Ok(())
        } else {
            Err(Error::Dimension(
                "input process does not match grid, particles and dimensions".into(),
            ))
        }
    }

    /// Decoupled solve `S0(I)`. `warm` seeds Newton iterations for the control.
    fn base_solve(
        &self,
        input: &InputProcess<T>,
        warm: Option<&ControlPaths<T>>,
    ) -> Result<FbsdeSolution<T>> {
        self.base_solves
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let (d, m, _k) = (self.spec.d, self.spec.m, self.spec.k);
        let (nt, mm) = (self.grid.steps(), self.particles());
        let dt = self.grid.dt();
        let inc = &self.noise.increments;

        let mut x = PathArray::zeros(nt + 1, mm, d);
        x.step_mut(0).copy_from_slice(&self.xi);
        let stride = mm * d;
        for n in 0..nt {
            let (head, tail) = x.as_mut_slice().split_at_mut((n + 1) * stride);
            let prev = &head[n * stride..];
            let next = &mut tail[..stride];
            next.par_chunks_mut(d)
                .with_min_len(PAR_CHUNK)
                .enumerate()
                .for_each(|(i, out)| {
                    euler_update(
                        &prev[i * d..(i + 1) * d],
                        input.i_b.at(n, i),
                        input.i_sigma.at(n, i),
                        inc.at(n, i),
                        dt,
                        out,
                    );
                });
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n + 1 });
            }
        }

        let mut y = PathArray::zeros(nt + 1, mm, d);
        let mut z = PathArray::zeros(nt, mm, d * m);
        let mut y_pred = PathArray::zeros(nt, mm, d);
        y.step_mut(nt).copy_from_slice(input.i_g.step(0));
        for n in (0..nt).rev() {
            let (yhat, zn) = regress_step(
                self.degree,
                x.step(n),
                d,
                y.step(n + 1),
                inc.step(n),
                m,
                dt,
                n,
            )?;
            for ((o, &p), &f) in y.step_mut(n).iter_mut().zip(&yhat).zip(input.i_f.step(n)) {
                *o = p + f * dt;
            }
            if y.step(n).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n });
            }
            y_pred.step_mut(n).copy_from_slice(&yhat);
            z.step_mut(n).copy_from_slice(&zn);
        }

        let control = self.optimal_control(&x, &y, &z, warm)?;

        Ok(FbsdeSolution {
            states: StatePaths {
                x,
                noise: self.noise.clone(),
            },
            adjoint: AdjointPaths { y, z, y_pred },
            control,
            gamma: T::zero(),
            diagnostics: Diagnostics::default(),
            summary: None,
        })
    }

    /// `F(Theta)`: drift, volatility, adjoint driver and terminal adjoint
    /// evaluated along `theta`.
    fn coefficient_inputs(&self, theta: &FbsdeSolution<T>) -> InputProcess<T> {
        let (d, m, k) = (self.spec.d, self.spec.m, self.spec.k);
        let (nt, mm) = (self.grid.steps(), self.particles());
        let mut out = InputProcess::zeros(nt, mm, d, m);
        let x = &theta.states.x;
        for n in 0..nt {
            let cloud = x.cloud(n);
            let mean = cloud.mean().to_vec();
            let c = &self.coeffs[n];
            let alphas = theta.control.values.step(n);
            out.i_b
                .step_mut(n)
                .par_chunks_mut(d)
                .zip(out.i_sigma.step_mut(n).par_chunks_mut(d * m))
                .with_min_len(PAR_CHUNK)
                .enumerate()
                .for_each(|(i, (b, s))| {
                    let xi = cloud.point(i);
                    let a = &alphas[i * k..(i + 1) * k];
                    c.drift_into(xi, &mean, a, b);
                    c.vol_into(xi, &mean, a, s);
                });
            adjoint_driver(
                c,
                &self.spec.cost,
                self.grid.time(n),
                &cloud,
                theta.adjoint.y.step(n),
                theta.adjoint.z.step(n),
                alphas,
                out.i_f.step_mut(n),
            );
        }
        terminal_adjoint(&self.spec.cost, &x.cloud(nt), out.i_g.step_mut(0));
        out
    }

    /// Gauss-Seidel sweep for `E(gamma, xi, input)` with the same fixed
    /// points as `S0(input + gamma F(theta))`. The forward pass evaluates the
    /// coefficients on the new paths, predicting the adjoint by
    /// `Y_n + G_n (X_n' - X_n)` with `G_n` the linear regression slope of
    /// `Y_n` on `X_n` along `theta`. The backward pass uses the new paths.
    fn predictive_sweep(
        &self,
        gamma: T,
        input: &InputProcess<T>,
        theta: &FbsdeSolution<T>,
    ) -> Result<FbsdeSolution<T>> {
        self.base_solves
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let (d, m, k) = (self.spec.d, self.spec.m, self.spec.k);
        let (nt, mm) = (self.grid.steps(), self.particles());
        let dt = self.grid.dt();
        let inc = &self.noise.increments;
        let (x_old, y_old, z_old) = (&theta.states.x, &theta.adjoint.y, &theta.adjoint.z);

        let mut x = PathArray::zeros(nt + 1, mm, d);
        x.step_mut(0).copy_from_slice(&self.xi);
        let mut y_guess = PathArray::zeros(nt, mm, d);
        let mut alpha = ControlPaths::zeros(nt, mm, k);
        for n in 0..nt {
            let fit = LinearFit::fit(1, x_old.step(n), d, y_old.step(n), d, n)?;
            let slope = fit.jacobian(&self.xi[..d]);
            let cloud = x.cloud(n);
            let mean = cloud.mean().to_vec();
            let t = self.grid.time(n);
            let c = &self.coeffs[n];
            let mut next = vec![T::zero(); mm * d];
            next.par_chunks_mut(d)
                .zip(y_guess.step_mut(n).par_chunks_mut(d))
                .zip(alpha.values.step_mut(n).par_chunks_mut(k))
                .with_min_len(PAR_CHUNK)
                .enumerate()
                .try_for_each_init(
                    || (vec![T::zero(); d], vec![T::zero(); d * m]),
                    |(b, s), (i, ((out, yg), a))| {
                        let xi = cloud.point(i);
                        let xo = x_old.at(n, i);
                        yg.copy_from_slice(y_old.at(n, i));
                        for l in 0..d {
                            for c2 in 0..d {
                                yg[l] = yg[l] + slope[l * d + c2] * (xi[c2] - xo[c2]);
                            }
                        }
                        minimize_alpha_into(
                            c,
                            &self.spec.cost,
                            t,
                            xi,
                            &cloud,
                            yg,
                            z_old.at(n, i),
                            &self.newton,
                            Some(theta.control.at(n, i)),
                            a,
                        )?;
                        c.drift_into(xi, &mean, a, b);
                        c.vol_into(xi, &mean, a, s);
                        for (bv, &ib) in b.iter_mut().zip(input.i_b.at(n, i)) {
                            *bv = ib + gamma * *bv;
                        }
                        for (sv, &is) in s.iter_mut().zip(input.i_sigma.at(n, i)) {
                            *sv = is + gamma * *sv;
                        }
                        euler_update(xi, b, s, inc.at(n, i), dt, out);
                        Ok(())
                    },
                )?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n + 1 });
            }
            x.step_mut(n + 1).copy_from_slice(&next);
        }

        let mut y = PathArray::zeros(nt + 1, mm, d);
        let mut z = PathArray::zeros(nt, mm, d * m);
        let mut y_pred = PathArray::zeros(nt, mm, d);
        terminal_adjoint(&self.spec.cost, &x.cloud(nt), y.step_mut(nt));
        for (o, &g) in y.step_mut(nt).iter_mut().zip(input.i_g.step(0)) {
            *o = g + gamma * *o;
        }
        let mut driver = vec![T::zero(); mm * d];
        for n in (0..nt).rev() {
            let (yhat, zn) = regress_step(
                self.degree,
                x.step(n),
                d,
                y.step(n + 1),
                inc.step(n),
                m,
                dt,
                n,
            )?;
            adjoint_driver(
                &self.coeffs[n],
                &self.spec.cost,
                self.grid.time(n),
                &x.cloud(n),
                y_guess.step(n),
                &zn,
                alpha.values.step(n),
                &mut driver,
            );
            for (((o, &p), &f), &g) in y
                .step_mut(n)
                .iter_mut()
                .zip(&yhat)
                .zip(input.i_f.step(n))
                .zip(&driver)
            {
                *o = p + (f + gamma * g) * dt;
            }
            if y.step(n).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n });
            }
            y_pred.step_mut(n).copy_from_slice(&yhat);
            z.step_mut(n).copy_from_slice(&zn);
        }
        let control = self.optimal_control(&x, &y, &z, Some(&alpha))?;
        Ok(FbsdeSolution {
            states: StatePaths {
                x,
                noise: self.noise.clone(),
            },
            adjoint: AdjointPaths { y, z, y_pred },
            control,
            gamma: T::zero(),
            diagnostics: Diagnostics::default(),
            summary: None,
        })
    }

    /// `alpha_hat(X_n, P_{X_n}, Y_n, Z_n)` on every step.
    fn optimal_control(
        &self,
        x: &PathArray<T>,
        y: &PathArray<T>,
        z: &PathArray<T>,
        warm: Option<&ControlPaths<T>>,
    ) -> Result<ControlPaths<T>> {
        let (d, m, k) = (self.spec.d, self.spec.m, self.spec.k);
        let (nt, mm) = (self.grid.steps(), self.particles());
        let mut control = ControlPaths::zeros(nt, mm, k);
        for n in 0..nt {
            let cloud = x.cloud(n);
            let t = self.grid.time(n);
            let c = &self.coeffs[n];
            let (yn, zn) = (y.step(n), z.step(n));
            control
                .values
                .step_mut(n)
                .par_chunks_mut(k)
                .with_min_len(PAR_CHUNK)
                .enumerate()
                .try_for_each(|(i, out)| {
                    let start = warm.map(|w| w.at(n, i));
                    minimize_alpha_into(
                        c,
                        &self.spec.cost,
                        t,
                        cloud.point(i),
                        &cloud,
                        &yn[i * d..(i + 1) * d],
                        &zn[i * d * m..(i + 1) * d * m],
                        &self.newton,
                        start,
                        out,
                    )
                })?;
        }
        Ok(control)
    }

    fn zero_solution(&self) -> FbsdeSolution<T> {
        let (d, m, k) = (self.spec.d, self.spec.m, self.spec.k);
        let (nt, mm) = (self.grid.steps(), self.particles());
        let mut x = PathArray::zeros(nt + 1, mm, d);
        for n in 0..=nt {
            x.step_mut(n).copy_from_slice(&self.xi);
        }
        FbsdeSolution {
            states: StatePaths {
                x,
                noise: self.noise.clone(),
            },
            adjoint: AdjointPaths {
                y: PathArray::zeros(nt + 1, mm, d),
                z: PathArray::zeros(nt, mm, d * m),
                y_pred: PathArray::zeros(nt, mm, d),
            },
            control: ControlPaths::zeros(nt, mm, k),
            gamma: T::zero(),
            diagnostics: Diagnostics::default(),
            summary: None,
        }
    }

    /// `Phi_{gamma,eta}(theta)`: the solution of `E(gamma, xi, I + eta F(theta))`.
    fn picard_exact(
        &self,
        gamma: T,
        eta: T,
        input: &InputProcess<T>,
        theta: &FbsdeSolution<T>,
        cfg: &ContinuationConfig<T>,
    ) -> Result<FbsdeSolution<T>> {
        let mut shifted = input.clone();
        if eta != T::zero() {
            shifted.add_scaled(&self.coefficient_inputs(theta), eta);
        }
        if gamma == T::zero() {
            return self.base_solve(&shifted, Some(&theta.control));
        }
        self.solve_e(gamma, &shifted, cfg, Some(theta))
    }

    /// Continuation from `gamma = 0` up to `gamma`.
    fn solve_e(
        &self,
        gamma: T,
        input: &InputProcess<T>,
        cfg: &ContinuationConfig<T>,
        warm: Option<&FbsdeSolution<T>>,
    ) -> Result<FbsdeSolution<T>> {
        let base = self.base_solve(input, warm.map(|w| &w.control))?;
        if gamma == T::zero() {
            return Ok(base);
        }
        let mut diagnostics = Diagnostics::default();
        let mut current = base;
        let mut reached = T::zero();
        let mut delta = cfg.delta0;
        let mut omega = cfg.omega;
        let slack = T::lit(1e-12);
        while reached < gamma - slack {
            let eta = delta.min(gamma - reached);
            let target = if gamma - (reached + eta) <= slack {
                gamma
            } else {
                reached + eta
            };
            let final_level = target == gamma;
            let tol = if final_level {
                cfg.picard_tol
            } else {
                cfg.level_tol.max(cfg.picard_tol)
            };
            let start = match cfg.init {
                PicardInit::Previous => current.clone(),
                PicardInit::Zero => self.zero_solution(),
            };
            match self.level(
                reached,
                target - reached,
                input,
                start,
                omega,
                tol,
                cfg,
                &mut diagnostics,
            ) {
                Ok((sol, rec, w, trace)) => {
                    omega = w;
                    diagnostics.levels.push(rec);
                    if final_level {
                        diagnostics.residual_trace = trace;
                    }
                    current = sol;
                    reached = target;
                }
                Err(trace) => {
                    delta = delta * T::lit(0.5);
                    diagnostics.step_halvings += 1;
                    if delta < cfg.min_delta {
                        return Err(Error::NonConvergence {
                            gamma: (reached + eta).as_f64(),
                            min_step: cfg.min_delta.as_f64(),
                            trace,
                        });
                    }
                }
            }
        }
        current.gamma = gamma;
        diagnostics.base_solves = self.base_solves.load(std::sync::atomic::Ordering::Relaxed);
        current.diagnostics = diagnostics;
        Ok(current)
    }

    /// Relaxed Picard iteration from `gamma_minus` to `gamma_minus + eta`.
    /// Returns the solution, its record, the relaxation that worked and the
    /// residual trace, or the trace of a failed attempt.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn level(
        &self,
        gamma_minus: T,
        eta: T,
        input: &InputProcess<T>,
        start: FbsdeSolution<T>,
        omega0: T,
        tol: T,
        cfg: &ContinuationConfig<T>,
        diag: &mut Diagnostics,
    ) -> std::result::Result<(FbsdeSolution<T>, LevelRecord, T, Vec<f64>), Vec<f64>> {
        let dt = self.grid.dt();
        let gamma = gamma_minus + eta;
        let min_omega = T::lit(1.0 / 1024.0);
        let mut omega = omega0;
        let mut last_trace = Vec::new();
        'restart: while omega >= min_omega {
            let mut theta = start.clone();
            let mut trace: Vec<f64> = Vec::new();
            for it in 0..cfg.max_picard {
                let image = match cfg.inner {
                    InnerSolve::Flat => match cfg.sweep {
                        Sweep::Predictive => self.predictive_sweep(gamma, input, &theta),
                        Sweep::Jacobi => {
                            let mut shifted = input.clone();
                            shifted.add_scaled(&self.coefficient_inputs(&theta), gamma);
                            self.base_solve(&shifted, Some(&theta.control))
                        }
                    },
                    InnerSolve::Nested => self.picard_exact(gamma_minus, eta, input, &theta, cfg),
                };
                let image = match image {
                    Ok(s) => s,
                    Err(Error::NonFinite { .. }) | Err(Error::NewtonFailure { .. }) => {
                        omega = omega * T::lit(0.5);
                        diag.omega_halvings += 1;
                        last_trace = trace;
                        continue 'restart;
                    }
                    Err(_) => return Err(trace),
                };
                let change = s_distance(&image, &theta, dt) / (T::one() + s_norm(&image, dt));
                let change_f = change.as_f64();
                trace.push(change_f);
                let n = trace.len();
                let diverging = !change_f.is_finite()
                    || change_f > 1e6
                    || (n >= 3 && trace[n - 1] > trace[n - 2] && trace[n - 2] > trace[n - 3]);
                if diverging {
                    omega = omega * T::lit(0.5);
                    diag.omega_halvings += 1;
                    last_trace = trace;
                    continue 'restart;
                }
                if change <= tol {
                    let rec = LevelRecord {
                        gamma: gamma.as_f64(),
                        step: eta.as_f64(),
                        omega: omega.as_f64(),
                        iterations: it + 1,
                        final_change: change_f,
                    };
                    let mut out = image;
                    out.gamma = gamma;
                    return Ok((out, rec, omega, trace));
                }
                if omega == T::one() {
                    theta = image;
                } else {
                    relax(&mut theta, &image, omega);
                }
            }
            return Err(trace);
        }
        Err(last_trace)
    }
}

fn relax<T: Real>(theta: &mut FbsdeSolution<T>, image: &FbsdeSolution<T>, w: T) {
    theta.states.x.relax_towards(&image.states.x, w);
    theta.adjoint.y.relax_towards(&image.adjoint.y, w);
    theta.adjoint.z.relax_towards(&image.adjoint.z, w);
    theta.adjoint.y_pred.relax_towards(&image.adjoint.y_pred, w);
    theta.control.values.relax_towards(&image.control.values, w);
}

/// The `gamma = 0` system: forward paths driven by the inputs only, backward
/// regression sweep with exogenous driver, control from the optimality
/// condition.
pub fn solve_decoupled<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    xi: &ParticleCloud<T>,
    input: &InputProcess<T>,
    seed: u64,
) -> Result<FbsdeSolution<T>> {
    let noise = generate_noise(spec, grid, xi.len(), seed);
    solve_decoupled_with(spec, grid, xi, input, noise, DEFAULT_BASIS_DEGREE)
}

pub fn solve_decoupled_with<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    xi: &ParticleCloud<T>,
    input: &InputProcess<T>,
    noise: Arc<NoiseBank<T>>,
    degree: usize,
) -> Result<FbsdeSolution<T>> {
    let ctx = Context::new(spec, grid, xi, noise, degree)?;
    ctx.check_input(input)?;
    ctx.base_solve(input, None)
}

/// Picard map `Phi`: builds `I' = I + eta F(theta_in)` and returns the
/// solution of `E(gamma, xi, I')`, reusing the noise of `theta_in`.
#[allow(clippy::too_many_arguments)]
pub fn picard_map<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    gamma: T,
    eta: T,
    xi: &ParticleCloud<T>,
    input: &InputProcess<T>,
    theta_in: &FbsdeSolution<T>,
    cfg: &ContinuationConfig<T>,
) -> Result<FbsdeSolution<T>> {
    cfg.validate()?;
    if gamma < T::zero() || eta < T::zero() || gamma + eta > T::one() + T::lit(1e-12) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= gamma, 0 <= eta, gamma + eta <= 1; got {gamma}, {eta}"
        )));
    }
    let ctx = Context::new(spec, grid, xi, theta_in.states.noise.clone(), cfg.degree)?;
    ctx.check_input(input)?;
    ctx.picard_exact(gamma, eta, input, theta_in, cfg)
}

/// Solves `E(gamma, xi, I)` by continuation in the coupling strength.
pub fn solve_e<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    gamma: T,
    xi: &ParticleCloud<T>,
    input: &InputProcess<T>,
    cfg: &ContinuationConfig<T>,
    seed: u64,
) -> Result<FbsdeSolution<T>> {
    let noise = generate_noise(spec, grid, xi.len(), seed);
    solve_e_with(spec, grid, gamma, xi, input, cfg, noise)
}

pub fn solve_e_with<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    gamma: T,
    xi: &ParticleCloud<T>,
    input: &InputProcess<T>,
    cfg: &ContinuationConfig<T>,
    noise: Arc<NoiseBank<T>>,
) -> Result<FbsdeSolution<T>> {
    cfg.validate()?;
    if !(gamma >= T::zero() && gamma <= T::one()) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let ctx = Context::new(spec, grid, xi, noise, cfg.degree)?;
    ctx.check_input(input)?;
    ctx.solve_e(gamma, input, cfg, None)
}

/// The control problem itself: `E(1, delta_{x0}, 0)` on `particles`
/// particles, with the cost and `E[Y_0]` estimates attached.
pub fn solve_mkv_fbsde<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    particles: usize,
    cfg: &ContinuationConfig<T>,
    seed: u64,
) -> Result<FbsdeSolution<T>> {
    if particles < 2 {
        return Err(Error::InvalidParameter(
            "need at least two particles".into(),
        ));
    }
    let xi = ParticleCloud::dirac(&spec.x0, particles);
    solve_mkv_fbsde_from(spec, grid, &xi, cfg, seed)
}

/// Same as [`solve_mkv_fbsde`] from a general initial cloud.
pub fn solve_mkv_fbsde_from<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    xi: &ParticleCloud<T>,
    cfg: &ContinuationConfig<T>,
    seed: u64,
) -> Result<FbsdeSolution<T>> {
    let input = InputProcess::zeros(grid.steps(), xi.len(), spec.d, spec.m);
    let mut sol = solve_e(spec, grid, T::one(), xi, &input, cfg, seed)?;
    sol.summary = Some(cost_summary(spec, grid, &sol));
    Ok(sol)
}

/// Cost of the solution's control and `E[Y_0]` with standard errors.
///
/// The `Y_0` error uses the pathwise representation
/// `Y_T + sum_n (Y_n - E[Y_{n+1} | X_n])`, whose particle mean equals the
/// mean of `Y_0` because the regression basis contains constants.
pub fn cost_summary<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    sol: &FbsdeSolution<T>,
) -> CostSummary<T> {
    let (j, j_se) = mean_and_se(&particle_costs(spec, grid, &sol.states, &sol.control));
    let d = spec.d;
    let nt = grid.steps();
    let mm = sol.particles();
    let mut y0 = Vec::with_capacity(d);
    let mut y0_se = Vec::with_capacity(d);
    for l in 0..d {
        let zeta: Vec<T> = (0..mm)
            .map(|i| {
                let mut v = sol.adjoint.y.at(nt, i)[l];
                for n in 0..nt {
                    v = v + sol.adjoint.y.at(n, i)[l] - sol.adjoint.y_pred.at(n, i)[l];
                }
                v
            })
            .collect();
        let (_, se) = mean_and_se(&zeta);
        let mean = (0..mm).map(|i| sol.adjoint.y.at(0, i)[l]).sum::<T>() / T::from_usize_lossy(mm);
        y0.push(mean);
        y0_se.push(se);
    }
    CostSummary { j, j_se, y0, y0_se }
}

/// Defects of a solution of `E(1, xi, 0)` measured by one fresh forward and
/// backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub forward: f64,
    pub backward: f64,
    pub terminal: f64,
    pub stationarity: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.forward
            .max(self.backward)
            .max(self.terminal)
            .max(self.stationarity)
    }
}

pub fn residual<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    sol: &FbsdeSolution<T>,
    degree: usize,
) -> Result<ResidualReport> {
    let (d, m, k) = (spec.d, spec.m, spec.k);
    let (nt, mm) = (grid.steps(), sol.particles());
    let dt = grid.dt();
    let coeffs = spec.dynamics.sample(&grid.left_times())?;
    let x = &sol.states.x;
    let (y, z) = (&sol.adjoint.y, &sol.adjoint.z);
    let inc = &sol.states.noise.increments;
    let mut forward = T::zero();
    let mut backward = T::zero();
    let mut stationarity = T::zero();
    let mut b = vec![T::zero(); d];
    let mut s = vec![T::zero(); d * m];
    let mut next = vec![T::zero(); d];
    let mut g = vec![T::zero(); k];
    let mut driver = vec![T::zero(); mm * d];
    for n in 0..nt {
        let cloud = x.cloud(n);
        let c = &coeffs[n];
        let t = grid.time(n);
        for i in 0..mm {
            let a = sol.control.at(n, i);
            c.drift_into(cloud.point(i), cloud.mean(), a, &mut b);
            c.vol_into(cloud.point(i), cloud.mean(), a, &mut s);
            euler_update(cloud.point(i), &b, &s, inc.at(n, i), dt, &mut next);
            for (p, &q) in next.iter().zip(x.at(n + 1, i)) {
                forward = forward.max((*p - q).abs());
            }
            let p = HamiltonianPoint {
                t,
                x: cloud.point(i),
                cloud: &cloud,
                y: y.at(n, i),
                z: z.at(n, i),
                alpha: a,
            };
            dalpha_hamiltonian_at(c, &spec.cost, &p, &mut g);
            stationarity = stationarity.max(dot(&g, &g).sqrt());
        }
        let (yhat, zn) = regress_step(degree, x.step(n), d, y.step(n + 1), inc.step(n), m, dt, n)?;
        adjoint_driver(
            c,
            &spec.cost,
            t,
            &cloud,
            y.step(n),
            z.step(n),
            sol.control.values.step(n),
            &mut driver,
        );
        for i in 0..mm * d {
            backward = backward.max((y.step(n)[i] - yhat[i] - driver[i] * dt).abs());
        }
        for (p, &q) in zn.iter().zip(z.step(n)) {
            backward = backward.max((*p - q).abs() * dt.sqrt());
        }
    }
    let mut term = vec![T::zero(); mm * d];
    terminal_adjoint(&spec.cost, &x.cloud(nt), &mut term);
    let terminal = term
        .iter()
        .zip(y.step(nt))
        .fold(T::zero(), |acc, (&p, &q)| acc.max((p - q).abs()));
    Ok(ResidualReport {
        forward: forward.as_f64(),
        backward: backward.as_f64(),
        terminal: terminal.as_f64(),
        stationarity: stationarity.as_f64(),
    })
}
