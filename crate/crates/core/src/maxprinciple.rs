//! Forward simulation for a given control, Monte Carlo cost, the adjoint
//! equation for a fixed control, the Gateaux derivative of the cost, and a
//! gradient-descent solver used to cross-check the forward-backward route.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{
    adjoint_driver, dalpha_hamiltonian_at, terminal_adjoint, HamiltonianPoint,
};
use crate::linalg::frobenius;
use crate::measure::ParticleCloud;
use crate::model::{DynamicsAt, ModelSpec};
use crate::noise::{stream_rng, NoiseBank};
use crate::paths::PathArray;
use crate::regression::LinearFit;
use crate::scalar::{dot, mean_and_se, Real, PAR_CHUNK};

/// Default polynomial degree of the regression basis (affine).
pub const DEFAULT_BASIS_DEGREE: usize = 1;

/// Uniform grid `t_n = n T / Nt` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    horizon: T,
    steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter(
                "time grid needs at least one step".into(),
            ));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> T {
        self.horizon / T::from_usize_lossy(self.steps)
    }

    pub fn time(&self, n: usize) -> T {
        if n == self.steps {
            self.horizon
        } else {
            self.dt() * T::from_usize_lossy(n)
        }
    }

    /// `t_0, ..., t_{Nt-1}`, where coefficients are frozen.
    pub fn left_times(&self) -> Vec<T> {
        (0..self.steps).map(|n| self.time(n)).collect()
    }

    /// `t_0, ..., t_Nt`.
    pub fn times(&self) -> Vec<T> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }
}

/// Per-particle control at each left grid point, `Nt x M x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPaths<T> {
    pub values: PathArray<T>,
}

impl<T: Real> ControlPaths<T> {
    pub fn zeros(steps: usize, particles: usize, k: usize) -> Self {
        Self {
            values: PathArray::zeros(steps, particles, k),
        }
    }

    pub fn constant(steps: usize, particles: usize, alpha: &[T]) -> Self {
        Self {
            values: PathArray::filled(steps, particles, alpha.len(), alpha),
        }
    }

    pub fn from_fn(
        steps: usize,
        particles: usize,
        k: usize,
        mut f: impl FnMut(usize, usize, &mut [T]),
    ) -> Self {
        let mut values = PathArray::zeros(steps, particles, k);
        for n in 0..steps {
            for i in 0..particles {
                f(n, i, values.at_mut(n, i));
            }
        }
        Self { values }
    }

    /// Same random smooth function of time for every particle:
    /// `a0 + a1 cos(pi t / T) + a2 sin(2 pi t / T)` per coordinate with
    /// standard normal coefficients.
    pub fn random_smooth(grid: &TimeGrid<T>, particles: usize, k: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let coef: Vec<[f64; 3]> = (0..k)
            .map(|_| {
                [
                    std_normal(&mut rng),
                    std_normal(&mut rng),
                    std_normal(&mut rng),
                ]
            })
            .collect();
        let h = grid.horizon().as_f64();
        Self::from_fn(grid.steps(), particles, k, |n, _, out| {
            let t = grid.time(n).as_f64() / h;
            for (o, a) in out.iter_mut().zip(&coef) {
                let pi = std::f64::consts::PI;
                *o = T::lit(a[0] + a[1] * (pi * t).cos() + a[2] * (2.0 * pi * t).sin());
            }
        })
    }

    /// Independent normal entries with standard deviation `scale`.
    pub fn random_rough(
        grid: &TimeGrid<T>,
        particles: usize,
        k: usize,
        seed: u64,
        scale: T,
    ) -> Self {
        let mut rng = stream_rng(seed, 1);
        Self::from_fn(grid.steps(), particles, k, |_, _, out| {
            for o in out.iter_mut() {
                *o = scale * T::lit(std_normal(&mut rng));
            }
        })
    }

    pub fn steps(&self) -> usize {
        self.values.steps()
    }

    pub fn particles(&self) -> usize {
        self.values.particles()
    }

    pub fn k(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize) -> &[T] {
        self.values.at(n, i)
    }

    /// `self + eps * direction`.
    pub fn perturbed(&self, direction: &Self, eps: T) -> Self {
        let mut out = self.clone();
        for (a, &b) in out
            .values
            .as_mut_slice()
            .iter_mut()
            .zip(direction.values.as_slice())
        {
            *a = *a + eps * b;
        }
        out
    }

    /// `(1/M) sum_i sum_n alpha . beta dt`.
    pub fn inner(&self, other: &Self, dt: T) -> T {
        let s = dot(self.values.as_slice(), other.values.as_slice());
        s * dt / T::from_usize_lossy(self.particles())
    }

    pub fn norm(&self, dt: T) -> T {
        self.inner(self, dt).sqrt()
    }
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Particle states `Nt+1 x M x d` and the Brownian increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePaths<T> {
    pub x: PathArray<T>,
    pub noise: Arc<NoiseBank<T>>,
}

impl<T: Real> StatePaths<T> {
    pub fn particles(&self) -> usize {
        self.x.particles()
    }

    pub fn seed(&self) -> u64 {
        self.noise.seed
    }

    pub fn cloud(&self, n: usize) -> ParticleCloud<T> {
        self.x.cloud(n)
    }
}

/// Adjoint pair `(Y, Z)`: `Y` is `Nt+1 x M x d`, `Z` is `Nt x M x (d m)`
/// (row-major `d x m`). `y_pred` holds the regression predictor
/// `E[Y_{n+1} | X_n]` at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPaths<T> {
    pub y: PathArray<T>,
    pub z: PathArray<T>,
    pub y_pred: PathArray<T>,
}

fn check_control<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    control: &ControlPaths<T>,
) -> Result<()> {
    if control.steps() != grid.steps() || control.k() != spec.k {
        return Err(Error::Dimension(format!(
            "control is {} x {} x {}, expected {} steps of width {}",
            control.steps(),
            control.particles(),
            control.k(),
            grid.steps(),
            spec.k
        )));
    }
    Ok(())
}

/// Fresh Brownian increments for `particles` particles on `grid`.
pub fn generate_noise<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    particles: usize,
    seed: u64,
) -> Arc<NoiseBank<T>> {
    Arc::new(NoiseBank::generate(
        seed,
        0,
        particles,
        grid.steps(),
        spec.m,
        grid.dt(),
    ))
}

/// Euler scheme for the particle system started at `x0`, with noise drawn
/// from `seed`.
pub fn simulate_state<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    control: &ControlPaths<T>,
    seed: u64,
) -> Result<StatePaths<T>> {
    let noise = generate_noise(spec, grid, control.particles(), seed);
    let initial: Vec<T> = (0..control.particles())
        .flat_map(|_| spec.x0.clone())
        .collect();
    simulate_state_with(spec, grid, &initial, control, noise)
}

/// Euler scheme with explicit initial points (`M x d`) and given noise.
pub fn simulate_state_with<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    initial: &[T],
    control: &ControlPaths<T>,
    noise: Arc<NoiseBank<T>>,
) -> Result<StatePaths<T>> {
    check_control(spec, grid, control)?;
    let (d, m) = (spec.d, spec.m);
    let mm = control.particles();
    if initial.len() != mm * d || noise.particles() != mm || noise.steps() != grid.steps() {
        return Err(Error::Dimension(
            "initial points or noise do not match the control".into(),
        ));
    }
    let coeffs = spec.dynamics.sample(&grid.left_times())?;
    let dt = grid.dt();
    let mut x = PathArray::zeros(grid.steps() + 1, mm, d);
    x.step_mut(0).copy_from_slice(initial);
    let stride = mm * d;
    for n in 0..grid.steps() {
        let mean = x.step_mean(n);
        let c = &coeffs[n];
        let (head, tail) = x.as_mut_slice().split_at_mut((n + 1) * stride);
        let prev = &head[n * stride..];
        let next = &mut tail[..stride];
        let inc = &noise.increments;
        next.par_chunks_mut(d)
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each_init(
                || (vec![T::zero(); d], vec![T::zero(); d * m]),
                |(b, s), (i, out)| {
                    let xi = &prev[i * d..(i + 1) * d];
                    let a = control.at(n, i);
                    c.drift_into(xi, &mean, a, b);
                    c.vol_into(xi, &mean, a, s);
                    euler_update(xi, b, s, inc.at(n, i), dt, out);
                },
            );
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: n + 1 });
        }
    }
    Ok(StatePaths { x, noise })
}

#[inline]
pub(crate) fn euler_update<T: Real>(x: &[T], b: &[T], s: &[T], dw: &[T], dt: T, out: &mut [T]) {
    let m = dw.len();
    for l in 0..x.len() {
        let mut v = x[l] + b[l] * dt;
        for c in 0..m {
            v = v + s[l * m + c] * dw[c];
        }
        out[l] = v;
    }
}

/// Per-particle cost `sum_n f(t_n, X_n^i, mu_n, alpha_n^i) dt + g(X_T^i, mu_T)`.
pub fn particle_costs<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    control: &ControlPaths<T>,
) -> Vec<T> {
    let mm = states.particles();
    let dt = grid.dt();
    let f = spec.cost.running.as_ref();
    let mut acc = vec![T::zero(); mm];
    for n in 0..grid.steps() {
        let cloud = states.cloud(n);
        let t = grid.time(n);
        acc.par_iter_mut()
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each(|(i, a)| {
                *a = *a + f.value(t, cloud.point(i), &cloud, control.at(n, i)) * dt;
            });
    }
    let cloud = states.cloud(grid.steps());
    let g = spec.cost.terminal.as_ref();
    acc.par_iter_mut()
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .for_each(|(i, a)| {
            *a = *a + g.value(cloud.point(i), &cloud);
        });
    acc
}

/// Monte Carlo estimate of the cost.
pub fn cost<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    control: &ControlPaths<T>,
) -> T {
    cost_estimate(spec, grid, states, control).0
}

/// Cost estimate with its standard error over particles.
pub fn cost_estimate<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    control: &ControlPaths<T>,
) -> (T, T) {
    mean_and_se(&particle_costs(spec, grid, states, control))
}

/// One backward regression step: returns the predictor `E[Y_{n+1} | X_n]`
/// (`M x d`) and `Z_n = E[Y_{n+1} dW_n^T | X_n] / dt` (`M x d m`).
pub(crate) fn regress_step<T: Real>(
    degree: usize,
    x_n: &[T],
    d: usize,
    y_next: &[T],
    dw: &[T],
    m: usize,
    dt: T,
    step: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let mm = x_n.len() / d;
    let dm = d * m;
    let fit = LinearFit::fit(degree, x_n, d, y_next, d, step)?;
    let mut yhat = vec![T::zero(); mm * d];
    yhat.par_chunks_mut(d)
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .for_each(|(i, yo)| fit.predict_into(&x_n[i * d..(i + 1) * d], yo));
    // Centred products: (Y_{n+1} - Yhat_n) dW has the same conditional mean
    // as Y_{n+1} dW and vanishes for deterministic Y.
    let mut targets = vec![T::zero(); mm * dm];
    targets
        .par_chunks_mut(dm)
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .for_each(|(i, row)| {
            let w = &dw[i * m..(i + 1) * m];
            for l in 0..d {
                let e = y_next[i * d + l] - yhat[i * d + l];
                for c in 0..m {
                    row[l * m + c] = e * w[c];
                }
            }
        });
    let zfit = LinearFit::fit(degree, x_n, d, &targets, dm, step)?;
    let mut z = vec![T::zero(); mm * dm];
    z.par_chunks_mut(dm)
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .for_each(|(i, zo)| {
            zfit.predict_into(&x_n[i * d..(i + 1) * d], zo);
            for o in zo.iter_mut() {
                *o = *o / dt;
            }
        });
    Ok((yhat, z))
}

/// Adjoint equation for a fixed control, by backward least-squares Monte
/// Carlo with the default affine basis.
pub fn solve_adjoint<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    control: &ControlPaths<T>,
) -> Result<AdjointPaths<T>> {
    solve_adjoint_with_degree(spec, grid, states, control, DEFAULT_BASIS_DEGREE)
}

/// Adjoint equation with a polynomial basis of the given degree. The driver
/// is evaluated at the regression predictor (explicit scheme), which makes
/// the result the exact adjoint of the Euler-discretized cost up to the
/// regression projection.
pub fn solve_adjoint_with_degree<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    control: &ControlPaths<T>,
    degree: usize,
) -> Result<AdjointPaths<T>> {
    check_control(spec, grid, control)?;
    let (d, m) = (spec.d, spec.m);
    let mm = states.particles();
    let nt = grid.steps();
    let dt = grid.dt();
    let coeffs = spec.dynamics.sample(&grid.left_times())?;
    let mut y = PathArray::zeros(nt + 1, mm, d);
    let mut z = PathArray::zeros(nt, mm, d * m);
    let mut y_pred = PathArray::zeros(nt, mm, d);
    terminal_adjoint(&spec.cost, &states.cloud(nt), y.step_mut(nt));
    let mut driver = vec![T::zero(); mm * d];
    for n in (0..nt).rev() {
        let (yhat, zn) = regress_step(
            degree,
            states.x.step(n),
            d,
            y.step(n + 1),
            states.noise.increments.step(n),
            m,
            dt,
            n,
        )?;
        let cloud = states.cloud(n);
        adjoint_driver(
            &coeffs[n],
            &spec.cost,
            grid.time(n),
            &cloud,
            &yhat,
            &zn,
            control.values.step(n),
            &mut driver,
        );
        for ((o, &p), &dr) in y.step_mut(n).iter_mut().zip(&yhat).zip(&driver) {
            *o = p + dr * dt;
        }
        if y.step(n).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: n });
        }
        y_pred.step_mut(n).copy_from_slice(&yhat);
        z.step_mut(n).copy_from_slice(&zn);
    }
    Ok(AdjointPaths { y, z, y_pred })
}

/// `d_alpha H` at every particle and step, evaluated at the adjoint
/// predictor.
pub fn hamiltonian_gradient<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    adjoint: &AdjointPaths<T>,
    control: &ControlPaths<T>,
) -> Result<ControlPaths<T>> {
    check_control(spec, grid, control)?;
    let coeffs = spec.dynamics.sample(&grid.left_times())?;
    let mut out = ControlPaths::zeros(grid.steps(), states.particles(), spec.k);
    for n in 0..grid.steps() {
        let cloud = states.cloud(n);
        let t = grid.time(n);
        let c = &coeffs[n];
        out.values
            .step_mut(n)
            .par_chunks_mut(spec.k)
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each(|(i, o)| {
                let p = HamiltonianPoint {
                    t,
                    x: cloud.point(i),
                    cloud: &cloud,
                    y: adjoint.y_pred.at(n, i),
                    z: adjoint.z.at(n, i),
                    alpha: control.at(n, i),
                };
                dalpha_hamiltonian_at(c, &spec.cost, &p, o);
            });
    }
    Ok(out)
}

/// Gateaux derivative `(1/M) sum_i sum_n d_alpha H . beta dt`.
pub fn gateaux<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    adjoint: &AdjointPaths<T>,
    control: &ControlPaths<T>,
    direction: &ControlPaths<T>,
) -> Result<T> {
    check_control(spec, grid, direction)?;
    let grad = hamiltonian_gradient(spec, grid, states, adjoint, control)?;
    Ok(grad.inner(direction, grid.dt()))
}

/// Output of [`gradient_descent_solve`].
#[derive(Debug, Clone)]
pub struct DescentResult<T> {
    pub control: ControlPaths<T>,
    /// Cost before the first step and after each step.
    pub history: Vec<T>,
    pub states: StatePaths<T>,
    pub adjoint: AdjointPaths<T>,
}

/// Consecutive cost increases that count as divergence.
pub const DIVERGENCE_STREAK: usize = 5;

/// Relative cost increase below which a descent step is not counted as an
/// increase.
pub const DIVERGENCE_RTOL: f64 = 1e-6;

/// Steepest descent `alpha <- alpha - rho d_alpha H` from `alpha = 0` with
/// frozen noise.
pub fn gradient_descent_solve<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    particles: usize,
    seed: u64,
    rho: T,
    iters: usize,
) -> Result<DescentResult<T>> {
    let control = ControlPaths::zeros(grid.steps(), particles, spec.k);
    let noise = generate_noise(spec, grid, particles, seed);
    gradient_descent_from(spec, grid, control, noise, rho, iters)
}

/// Steepest descent from a given control and noise.
pub fn gradient_descent_from<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    mut control: ControlPaths<T>,
    noise: Arc<NoiseBank<T>>,
    rho: T,
    iters: usize,
) -> Result<DescentResult<T>> {
    if !(rho > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive, got {rho}"
        )));
    }
    let initial: Vec<T> = (0..control.particles())
        .flat_map(|_| spec.x0.clone())
        .collect();
    let mut states = simulate_state_with(spec, grid, &initial, &control, noise.clone())?;
    let mut adjoint = solve_adjoint(spec, grid, &states, &control)?;
    let mut history = vec![cost(spec, grid, &states, &control)];
    let mut streak = 0;
    for it in 0..iters {
        let grad = hamiltonian_gradient(spec, grid, &states, &adjoint, &control)?;
        control = control.perturbed(&grad, -rho);
        states = match simulate_state_with(spec, grid, &initial, &control, noise.clone()) {
            Ok(s) => s,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { iterations: it + 1 }),
            Err(e) => return Err(e),
        };
        adjoint = solve_adjoint(spec, grid, &states, &control)?;
        let j = cost(spec, grid, &states, &control);
        if !j.is_finite() {
            return Err(Error::Divergence { iterations: it + 1 });
        }
        let last = *history.last().expect("nonempty");
        streak = if j - last > T::lit(DIVERGENCE_RTOL) * last.abs().max(T::one()) {
            streak + 1
        } else {
            0
        };
        history.push(j);
        if streak >= DIVERGENCE_STREAK {
            return Err(Error::Divergence { iterations: it + 1 });
        }
    }
    Ok(DescentResult {
        control,
        history,
        states,
        adjoint,
    })
}

/// Linear part of the coefficients (no `b0`, no `s0`).
fn linear_drift_vol<T: Real>(
    c: &DynamicsAt<T>,
    v: &[T],
    vbar: &[T],
    beta: &[T],
    b: &mut [T],
    s: &mut [T],
) {
    c.drift_into(v, vbar, beta, b);
    b.iter_mut().zip(&c.b0).for_each(|(o, &z)| *o = *o - z);
    c.vol_into(v, vbar, beta, s);
    s.iter_mut()
        .zip(c.s0.as_slice())
        .for_each(|(o, &z)| *o = *o - z);
}

/// Euler scheme for the variation process along `direction`:
/// `dV = (b2 V + b1 mean(V) + b3 beta) dt + (s2(V) + s1(mean(V)) + s3(beta)) dW`,
/// `V_0 = 0`, driven by the noise stored in `states`.
pub fn variation_process<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    direction: &ControlPaths<T>,
) -> Result<PathArray<T>> {
    check_control(spec, grid, direction)?;
    let (d, m) = (spec.d, spec.m);
    let mm = states.particles();
    let coeffs = spec.dynamics.sample(&grid.left_times())?;
    let dt = grid.dt();
    let mut v = PathArray::zeros(grid.steps() + 1, mm, d);
    let stride = mm * d;
    for n in 0..grid.steps() {
        let vbar = v.step_mean(n);
        let c = &coeffs[n];
        let (head, tail) = v.as_mut_slice().split_at_mut((n + 1) * stride);
        let prev = &head[n * stride..];
        let next = &mut tail[..stride];
        next.par_chunks_mut(d)
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each_init(
                || (vec![T::zero(); d], vec![T::zero(); d * m]),
                |(b, s), (i, out)| {
                    let vi = &prev[i * d..(i + 1) * d];
                    linear_drift_vol(c, vi, &vbar, direction.at(n, i), b, s);
                    euler_update(vi, b, s, states.noise.increments.at(n, i), dt, out);
                },
            );
    }
    Ok(v)
}

/// Result of [`variation_check`], one entry per `eps`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VariationReport {
    pub eps: Vec<f64>,
    /// `max |(X^eps - X)/eps - V|` over particles and steps.
    pub errors: Vec<f64>,
    /// Rounding floor of the difference quotient at this `eps`.
    pub floors: Vec<f64>,
    /// Error in excess of the rounding floor.
    pub excess: Vec<f64>,
}

/// Compares difference quotients of the state along `direction` with the
/// variation process.
pub fn variation_check<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    control: &ControlPaths<T>,
    direction: &ControlPaths<T>,
    eps: &[T],
    seed: u64,
) -> Result<VariationReport> {
    if eps.iter().any(|&e| !(e > T::zero() && e <= T::one())) {
        return Err(Error::InvalidParameter(
            "eps values must lie in (0, 1]".into(),
        ));
    }
    let base = simulate_state(spec, grid, control, seed)?;
    let v = variation_process(spec, grid, &base, direction)?;
    let initial = base.x.step(0).to_vec();
    let scale_base = base.x.max_abs();
    let mut report = VariationReport {
        eps: Vec::new(),
        errors: Vec::new(),
        floors: Vec::new(),
        excess: Vec::new(),
    };
    for &e in eps {
        let moved = simulate_state_with(
            spec,
            grid,
            &initial,
            &control.perturbed(direction, e),
            base.noise.clone(),
        )?;
        let err = moved
            .x
            .as_slice()
            .iter()
            .zip(base.x.as_slice())
            .zip(v.as_slice())
            .fold(T::zero(), |acc, ((&a, &b), &w)| {
                acc.max(((a - b) / e - w).abs())
            });
        let scale = T::one() + scale_base + moved.x.max_abs();
        let floor = T::lit(4.0) * T::from_usize_lossy(grid.steps()) * T::epsilon() * scale / e;
        report.eps.push(e.as_f64());
        report.errors.push(err.as_f64());
        report.floors.push(floor.as_f64());
        report.excess.push((err - floor).max(T::zero()).as_f64());
    }
    Ok(report)
}

/// Both sides of the duality identity between the adjoint and the
/// variation process, with the standard error of their difference.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DualityReport {
    /// `E[Y_T . V_T]`.
    pub lhs: f64,
    /// `E int [Y . b3 beta + Z . s3 beta - d_x f . V - E~ d_mu f(..)(X~) . V~] dt`.
    pub rhs: f64,
    pub se: f64,
}

impl DualityReport {
    pub fn gap(&self) -> f64 {
        self.lhs - self.rhs
    }
}

pub fn duality_check<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    states: &StatePaths<T>,
    adjoint: &AdjointPaths<T>,
    control: &ControlPaths<T>,
    direction: &ControlPaths<T>,
) -> Result<DualityReport> {
    let v = variation_process(spec, grid, states, direction)?;
    let (d, m) = (spec.d, spec.m);
    let mm = states.particles();
    let nt = grid.steps();
    let dt = grid.dt();
    let coeffs = spec.dynamics.sample(&grid.left_times())?;
    let f = spec.cost.running.as_ref();
    let mut rhs = vec![T::zero(); mm];
    for n in 0..nt {
        let cloud = states.cloud(n);
        let t = grid.time(n);
        let c = &coeffs[n];
        let vn = v.step(n);
        let mf = T::from_usize_lossy(mm);
        let query_free = f.dmu_query_independent();
        let vbar = v.step_mean(n);
        rhs.par_iter_mut()
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each_init(
                || {
                    (
                        vec![T::zero(); d],
                        vec![T::zero(); d * m],
                        vec![T::zero(); d],
                    )
                },
                |(b, s, g), (i, acc)| {
                    let x = cloud.point(i);
                    let a = control.at(n, i);
                    let beta = direction.at(n, i);
                    // Control-only parts of the linear coefficients.
                    let zero_d = vec![T::zero(); d];
                    linear_drift_vol(c, &zero_d, &zero_d, beta, b, s);
                    let mut term =
                        dot(adjoint.y_pred.at(n, i), b) + frobenius(adjoint.z.at(n, i), s);
                    f.dx(t, x, &cloud, a, g);
                    term = term - dot(g, &vn[i * d..(i + 1) * d]);
                    if query_free {
                        f.dmu(t, x, &cloud, a, x, g);
                        term = term - dot(g, &vbar);
                    } else {
                        let mut cross = T::zero();
                        for j in 0..mm {
                            f.dmu(t, x, &cloud, a, cloud.point(j), g);
                            cross = cross + dot(g, &vn[j * d..(j + 1) * d]);
                        }
                        term = term - cross / mf;
                    }
                    *acc = *acc + term * dt;
                },
            );
    }
    let diffs: Vec<T> = (0..mm)
        .map(|i| dot(adjoint.y.at(nt, i), v.at(nt, i)) - rhs[i])
        .collect();
    let lhs: T = (0..mm)
        .map(|i| dot(adjoint.y.at(nt, i), v.at(nt, i)))
        .sum::<T>()
        / T::from_usize_lossy(mm);
    let (gap, se) = mean_and_se(&diffs);
    Ok(DualityReport {
        lhs: lhs.as_f64(),
        rhs: (lhs - gap).as_f64(),
        se: se.as_f64(),
    })
}
