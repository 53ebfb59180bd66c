//! Problem data: linear controlled dynamics, running and terminal costs with
//! their first derivatives (including measure derivatives), and the built-in
//! model families.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{frobenius, Matrix};
use crate::measure::ParticleCloud;
use crate::noise::stream_rng;
use crate::scalar::{dot, Real};

/// Coefficients of the linear dynamics frozen at one time.
///
/// Drift `b0 + b1 mean + b2 x + b3 alpha` and volatility
/// `s0 + s1(mean) + s2(x) + s3(alpha)`, where each linear map into `d x m`
/// matrices is stored as one matrix per input coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsAt<T> {
    pub b0: Vec<T>,
    pub b1: Matrix<T>,
    pub b2: Matrix<T>,
    pub b3: Matrix<T>,
    pub s0: Matrix<T>,
    pub s1: Vec<Matrix<T>>,
    pub s2: Vec<Matrix<T>>,
    pub s3: Vec<Matrix<T>>,
}

fn lin_map_acc<T: Real>(maps: &[Matrix<T>], u: &[T], out: &mut [T]) {
    for (map, &ul) in maps.iter().zip(u) {
        if ul != T::zero() {
            for (o, &v) in out.iter_mut().zip(map.as_slice()) {
                *o = *o + ul * v;
            }
        }
    }
}

fn pairing_acc<T: Real>(maps: &[Matrix<T>], z: &[T], out: &mut [T]) {
    for (o, map) in out.iter_mut().zip(maps) {
        *o = *o + frobenius(map.as_slice(), z);
    }
}

impl<T: Real> DynamicsAt<T> {
    pub fn zeros(d: usize, m: usize, k: usize) -> Self {
        Self {
            b0: vec![T::zero(); d],
            b1: Matrix::zeros(d, d),
            b2: Matrix::zeros(d, d),
            b3: Matrix::zeros(d, k),
            s0: Matrix::zeros(d, m),
            s1: vec![Matrix::zeros(d, m); d],
            s2: vec![Matrix::zeros(d, m); d],
            s3: vec![Matrix::zeros(d, m); k],
        }
    }

    /// One-dimensional coefficients `(b0, b1, b2, b3, s0, s1, s2, s3)`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(b0: T, b1: T, b2: T, b3: T, s0: T, s1: T, s2: T, s3: T) -> Self {
        Self {
            b0: vec![b0],
            b1: Matrix::scalar(b1),
            b2: Matrix::scalar(b2),
            b3: Matrix::scalar(b3),
            s0: Matrix::scalar(s0),
            s1: vec![Matrix::scalar(s1)],
            s2: vec![Matrix::scalar(s2)],
            s3: vec![Matrix::scalar(s3)],
        }
    }

    pub fn d(&self) -> usize {
        self.b0.len()
    }

    pub fn m(&self) -> usize {
        self.s0.cols()
    }

    pub fn k(&self) -> usize {
        self.b3.cols()
    }

    fn check_shape(&self, d: usize, m: usize, k: usize) -> Result<()> {
        let sq = |a: &Matrix<T>, r: usize, c: usize| a.rows() == r && a.cols() == c;
        let ok = self.b0.len() == d
            && sq(&self.b1, d, d)
            && sq(&self.b2, d, d)
            && sq(&self.b3, d, k)
            && sq(&self.s0, d, m)
            && self.s1.len() == d
            && self.s2.len() == d
            && self.s3.len() == k
            && self
                .s1
                .iter()
                .chain(&self.s2)
                .chain(&self.s3)
                .all(|a| sq(a, d, m));
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "coefficients do not match d={d}, m={m}, k={k}"
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.b0.iter().all(|v| v.is_finite())
            && [&self.b1, &self.b2, &self.b3, &self.s0]
                .iter()
                .all(|a| a.is_finite())
            && self
                .s1
                .iter()
                .chain(&self.s2)
                .chain(&self.s3)
                .all(|a| a.is_finite())
    }

    /// True when the volatility has no control term.
    pub fn control_free_volatility(&self) -> bool {
        self.s3.iter().all(|a| a.is_zero())
    }

    pub fn drift_into(&self, x: &[T], mean: &[T], alpha: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.b0);
        self.b1.mul_vec_acc(mean, out);
        self.b2.mul_vec_acc(x, out);
        self.b3.mul_vec_acc(alpha, out);
    }

    /// Volatility matrix written row-major into `out` (`d * m` entries).
    pub fn vol_into(&self, x: &[T], mean: &[T], alpha: &[T], out: &mut [T]) {
        out.copy_from_slice(self.s0.as_slice());
        lin_map_acc(&self.s1, mean, out);
        lin_map_acc(&self.s2, x, out);
        lin_map_acc(&self.s3, alpha, out);
    }

    /// `b2^T y + s2^T z`, the state gradient of `b.y + sigma.z`.
    pub fn x_pairing(&self, y: &[T], z: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        self.x_pairing_acc(y, z, out);
    }

    pub fn x_pairing_acc(&self, y: &[T], z: &[T], out: &mut [T]) {
        self.b2.tr_mul_vec_acc(y, out);
        pairing_acc(&self.s2, z, out);
    }

    /// `b1^T y + s1^T z`, the constant measure-derivative field of `b.y + sigma.z`.
    pub fn mean_pairing(&self, y: &[T], z: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        self.b1.tr_mul_vec_acc(y, out);
        pairing_acc(&self.s1, z, out);
    }

    /// `b3^T y + s3^T z`, the control gradient of `b.y + sigma.z`.
    pub fn alpha_pairing(&self, y: &[T], z: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        self.alpha_pairing_acc(y, z, out);
    }

    pub fn alpha_pairing_acc(&self, y: &[T], z: &[T], out: &mut [T]) {
        self.b3.tr_mul_vec_acc(y, out);
        pairing_acc(&self.s3, z, out);
    }
}

type CoefficientFn<T> = dyn Fn(T) -> DynamicsAt<T> + Send + Sync;

#[derive(Clone)]
enum Coefficients<T> {
    Constant(DynamicsAt<T>),
    TimeVarying(Arc<CoefficientFn<T>>),
}

/// Time-dependent linear dynamics.
#[derive(Clone)]
pub struct LinearDynamics<T> {
    d: usize,
    m: usize,
    k: usize,
    coefficients: Coefficients<T>,
}

impl<T> fmt::Debug for LinearDynamics<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.coefficients {
            Coefficients::Constant(_) => "constant",
            Coefficients::TimeVarying(_) => "time-varying",
        };
        f.debug_struct("LinearDynamics")
            .field("d", &self.d)
            .field("m", &self.m)
            .field("k", &self.k)
            .field("coefficients", &kind)
            .finish()
    }
}

impl<T: Real> LinearDynamics<T> {
    pub fn constant(at: DynamicsAt<T>) -> Result<Self> {
        let (d, m, k) = (at.d(), at.m(), at.k());
        at.check_shape(d, m, k)?;
        if !at.is_finite() {
            return Err(Error::InvalidParameter(
                "non-finite dynamics coefficient".into(),
            ));
        }
        Ok(Self {
            d,
            m,
            k,
            coefficients: Coefficients::Constant(at),
        })
    }

    /// Coefficients given as a function of time. Shapes and finiteness are
    /// checked whenever the coefficients are sampled.
    pub fn time_varying<F>(d: usize, m: usize, k: usize, f: F) -> Self
    where
        F: Fn(T) -> DynamicsAt<T> + Send + Sync + 'static,
    {
        Self {
            d,
            m,
            k,
            coefficients: Coefficients::TimeVarying(Arc::new(f)),
        }
    }

    pub fn zeros(d: usize, m: usize, k: usize) -> Self {
        Self::constant(DynamicsAt::zeros(d, m, k)).expect("zero coefficients are valid")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.m, self.k)
    }

    pub fn at(&self, t: T) -> DynamicsAt<T> {
        match &self.coefficients {
            Coefficients::Constant(c) => c.clone(),
            Coefficients::TimeVarying(f) => f(t),
        }
    }

    /// Coefficients at each of `times`, validated.
    pub fn sample(&self, times: &[T]) -> Result<Vec<DynamicsAt<T>>> {
        times
            .iter()
            .map(|&t| {
                let c = self.at(t);
                c.check_shape(self.d, self.m, self.k)?;
                if !c.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "dynamics coefficient not finite at t={t}"
                    )));
                }
                Ok(c)
            })
            .collect()
    }
}

/// Running cost `f(t, x, mu, alpha)` with first derivatives.
///
/// `dmu` returns the measure-derivative field `x' -> d_mu f(t, x, mu, alpha)(x')`
/// at the query point.
pub trait RunningCost<T: Real>: Send + Sync {
    fn value(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T]) -> T;
    fn dx(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], out: &mut [T]);
    fn dalpha(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], out: &mut [T]);
    fn dmu(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], query: &[T], out: &mut [T]);

    /// True when `dmu` does not depend on the query point.
    fn dmu_query_independent(&self) -> bool {
        false
    }

    /// Minimizer of `alpha -> f(t, x, mu, alpha) + linear . alpha` when known
    /// in closed form.
    fn alpha_closed_form(
        &self,
        _t: T,
        _x: &[T],
        _mu: &ParticleCloud<T>,
        _linear: &[T],
        _out: &mut [T],
    ) -> bool {
        false
    }

    /// Writes `(1/M) sum_j d_mu f(t, x_j, mu, alpha_j)(x_i)` for every atom
    /// `x_i` of `mu` into `out` (`M * d` entries), with `alpha_j` read from
    /// `alphas` (`M * k` entries).
    fn dmu_cross_average(&self, t: T, mu: &ParticleCloud<T>, alphas: &[T], out: &mut [T]) {
        let (m, d) = (mu.len(), mu.dim());
        let k = alphas.len() / m;
        let mf = T::from_usize_lossy(m);
        if self.dmu_query_independent() {
            let mut acc = vec![T::zero(); d];
            let mut buf = vec![T::zero(); d];
            for j in 0..m {
                self.dmu(
                    t,
                    mu.point(j),
                    mu,
                    &alphas[j * k..(j + 1) * k],
                    mu.point(0),
                    &mut buf,
                );
                acc.iter_mut().zip(&buf).for_each(|(a, &b)| *a = *a + b);
            }
            for row in out.chunks_exact_mut(d) {
                row.iter_mut().zip(&acc).for_each(|(o, &a)| *o = a / mf);
            }
        } else {
            out.par_chunks_mut(d)
                .with_min_len(crate::scalar::PAR_CHUNK)
                .enumerate()
                .for_each(|(i, row)| {
                    let mut buf = vec![T::zero(); d];
                    row.iter_mut().for_each(|o| *o = T::zero());
                    for j in 0..m {
                        self.dmu(
                            t,
                            mu.point(j),
                            mu,
                            &alphas[j * k..(j + 1) * k],
                            mu.point(i),
                            &mut buf,
                        );
                        row.iter_mut().zip(&buf).for_each(|(o, &b)| *o = *o + b);
                    }
                    row.iter_mut().for_each(|o| *o = *o / mf);
                });
        }
    }
}

/// Terminal cost `g(x, mu)` with first derivatives.
pub trait TerminalCost<T: Real>: Send + Sync {
    fn value(&self, x: &[T], mu: &ParticleCloud<T>) -> T;
    fn dx(&self, x: &[T], mu: &ParticleCloud<T>, out: &mut [T]);
    fn dmu(&self, x: &[T], mu: &ParticleCloud<T>, query: &[T], out: &mut [T]);

    fn dmu_query_independent(&self) -> bool {
        false
    }

    /// Writes `(1/M) sum_j d_mu g(x_j, mu)(x_i)` for every atom `x_i`.
    fn dmu_cross_average(&self, mu: &ParticleCloud<T>, out: &mut [T]) {
        let (m, d) = (mu.len(), mu.dim());
        let mf = T::from_usize_lossy(m);
        if self.dmu_query_independent() {
            let mut acc = vec![T::zero(); d];
            let mut buf = vec![T::zero(); d];
            for j in 0..m {
                self.dmu(mu.point(j), mu, mu.point(0), &mut buf);
                acc.iter_mut().zip(&buf).for_each(|(a, &b)| *a = *a + b);
            }
            for row in out.chunks_exact_mut(d) {
                row.iter_mut().zip(&acc).for_each(|(o, &a)| *o = a / mf);
            }
        } else {
            out.par_chunks_mut(d)
                .with_min_len(crate::scalar::PAR_CHUNK)
                .enumerate()
                .for_each(|(i, row)| {
                    let mut buf = vec![T::zero(); d];
                    row.iter_mut().for_each(|o| *o = T::zero());
                    for j in 0..m {
                        self.dmu(mu.point(j), mu, mu.point(i), &mut buf);
                        row.iter_mut().zip(&buf).for_each(|(o, &b)| *o = *o + b);
                    }
                    row.iter_mut().for_each(|o| *o = *o / mf);
                });
        }
    }
}

/// Running and terminal costs plus the strong-convexity modulus in the control.
#[derive(Clone)]
pub struct CostModel<T> {
    pub running: Arc<dyn RunningCost<T>>,
    pub terminal: Arc<dyn TerminalCost<T>>,
    pub lambda: T,
}

impl<T: fmt::Debug> fmt::Debug for CostModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostModel")
            .field("lambda", &self.lambda)
            .finish_non_exhaustive()
    }
}

impl<T: Real> CostModel<T> {
    pub fn new(
        running: impl RunningCost<T> + 'static,
        terminal: impl TerminalCost<T> + 'static,
        lambda: T,
    ) -> Self {
        Self {
            running: Arc::new(running),
            terminal: Arc::new(terminal),
            lambda,
        }
    }
}

/// Full problem datum: dynamics, costs, horizon and initial state.
#[derive(Debug, Clone)]
pub struct ModelSpec<T> {
    pub name: String,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub horizon: T,
    pub x0: Vec<T>,
    pub dynamics: LinearDynamics<T>,
    pub cost: CostModel<T>,
}

impl<T: Real> ModelSpec<T> {
    pub fn new(
        name: impl Into<String>,
        dynamics: LinearDynamics<T>,
        cost: CostModel<T>,
        horizon: T,
        x0: Vec<T>,
    ) -> Result<Self> {
        let (d, m, k) = dynamics.dims();
        if d == 0 || m == 0 || k == 0 {
            return Err(Error::Dimension("d, m and k must be positive".into()));
        }
        if x0.len() != d {
            return Err(Error::Dimension(format!(
                "x0 has length {}, expected {d}",
                x0.len()
            )));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("x0 must be finite".into()));
        }
        if !(cost.lambda >= T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be nonnegative, got {}",
                cost.lambda
            )));
        }
        Ok(Self {
            name: name.into(),
            d,
            m,
            k,
            horizon,
            x0,
            dynamics,
            cost,
        })
    }

    /// True when the volatility has no control term at every sampled time.
    pub fn control_free_volatility(&self, times: &[T]) -> bool {
        times
            .iter()
            .all(|&t| self.dynamics.at(t).control_free_volatility())
    }
}

/// Drift and volatility at `(t, x, mean, alpha)`.
pub fn drift_vol<T: Real>(
    spec: &ModelSpec<T>,
    t: T,
    x: &[T],
    mean: &[T],
    alpha: &[T],
) -> Result<(Vec<T>, Matrix<T>)> {
    if x.len() != spec.d || mean.len() != spec.d || alpha.len() != spec.k {
        return Err(Error::Dimension(format!(
            "expected x, mean in R^{} and alpha in R^{}",
            spec.d, spec.k
        )));
    }
    let slack = spec.horizon * T::lit(1e-12);
    if t < -slack || t > spec.horizon + slack {
        return Err(Error::InvalidParameter(format!(
            "time {t} outside [0, {}]",
            spec.horizon
        )));
    }
    let c = spec.dynamics.at(t);
    let mut b = vec![T::zero(); spec.d];
    c.drift_into(x, mean, alpha, &mut b);
    let mut s = Matrix::zeros(spec.d, spec.m);
    c.vol_into(x, mean, alpha, s.as_mut_slice());
    Ok((b, s))
}

/// Cost depending on the measure only through its mean.
pub trait MeanFieldRunning<T: Real>: Send + Sync {
    fn value(&self, t: T, x: &[T], mean: &[T], alpha: &[T]) -> T;
    fn dx(&self, t: T, x: &[T], mean: &[T], alpha: &[T], out: &mut [T]);
    fn dmean(&self, t: T, x: &[T], mean: &[T], alpha: &[T], out: &mut [T]);
    fn dalpha(&self, t: T, x: &[T], mean: &[T], alpha: &[T], out: &mut [T]);
    fn alpha_closed_form(
        &self,
        _t: T,
        _x: &[T],
        _mean: &[T],
        _linear: &[T],
        _out: &mut [T],
    ) -> bool {
        false
    }
}

pub trait MeanFieldTerminal<T: Real>: Send + Sync {
    fn value(&self, x: &[T], mean: &[T]) -> T;
    fn dx(&self, x: &[T], mean: &[T], out: &mut [T]);
    fn dmean(&self, x: &[T], mean: &[T], out: &mut [T]);
}

/// Adapter turning a mean-dependent cost into a [`RunningCost`] or
/// [`TerminalCost`]. The measure derivative of `mu -> c(mean(mu))` is the
/// constant field `d_mean c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughMean<C>(pub C);

impl<T: Real, C: MeanFieldRunning<T>> RunningCost<T> for ThroughMean<C> {
    fn value(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T]) -> T {
        self.0.value(t, x, mu.mean(), alpha)
    }
    fn dx(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], out: &mut [T]) {
        self.0.dx(t, x, mu.mean(), alpha, out)
    }
    fn dalpha(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], out: &mut [T]) {
        self.0.dalpha(t, x, mu.mean(), alpha, out)
    }
    fn dmu(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], _query: &[T], out: &mut [T]) {
        self.0.dmean(t, x, mu.mean(), alpha, out)
    }
    fn dmu_query_independent(&self) -> bool {
        true
    }
    fn alpha_closed_form(
        &self,
        t: T,
        x: &[T],
        mu: &ParticleCloud<T>,
        linear: &[T],
        out: &mut [T],
    ) -> bool {
        self.0.alpha_closed_form(t, x, mu.mean(), linear, out)
    }
}

impl<T: Real, C: MeanFieldTerminal<T>> TerminalCost<T> for ThroughMean<C> {
    fn value(&self, x: &[T], mu: &ParticleCloud<T>) -> T {
        self.0.value(x, mu.mean())
    }
    fn dx(&self, x: &[T], mu: &ParticleCloud<T>, out: &mut [T]) {
        self.0.dx(x, mu.mean(), out)
    }
    fn dmu(&self, x: &[T], mu: &ParticleCloud<T>, _query: &[T], out: &mut [T]) {
        self.0.dmean(x, mu.mean(), out)
    }
    fn dmu_query_independent(&self) -> bool {
        true
    }
}

/// Parameters of the scalar linear-quadratic model
/// `f = (q/2)x^2 + (qbar/2)(x - s mean)^2 + (r/2)alpha^2`,
/// `g = (c/2)x^2 + (cbar/2)(x - s_t mean)^2`,
/// `dX = (b1 mean + b2 X + b3 alpha)dt + sigma0 dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqParams<T> {
    pub q: T,
    pub qbar: T,
    pub s: T,
    pub r: T,
    pub c: T,
    pub cbar: T,
    pub s_t: T,
    pub b1: T,
    pub b2: T,
    pub b3: T,
    pub sigma0: T,
    pub horizon: T,
    pub x0: T,
}

impl<T: Real> LqParams<T> {
    /// The reference benchmark used throughout the tests and the CLI defaults.
    pub fn benchmark() -> Self {
        let l = T::lit;
        Self {
            q: l(1.0),
            qbar: l(1.0),
            s: l(1.0),
            r: l(1.0),
            c: l(1.0),
            cbar: l(0.0),
            s_t: l(1.0),
            b1: l(0.0),
            b2: l(0.5),
            b3: l(1.0),
            sigma0: l(0.3),
            horizon: l(1.0),
            x0: l(1.0),
        }
    }

    /// Same problem with every mean-field term removed.
    pub fn without_interaction(mut self) -> Self {
        self.qbar = T::zero();
        self.cbar = T::zero();
        self.b1 = T::zero();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqRunning<T> {
    pub q: T,
    pub qbar: T,
    pub s: T,
    pub r: T,
}

impl<T: Real> MeanFieldRunning<T> for LqRunning<T> {
    fn value(&self, _t: T, x: &[T], mean: &[T], alpha: &[T]) -> T {
        let half = T::lit(0.5);
        let u = x[0] - self.s * mean[0];
        half * (self.q * x[0] * x[0] + self.qbar * u * u + self.r * alpha[0] * alpha[0])
    }
    fn dx(&self, _t: T, x: &[T], mean: &[T], _alpha: &[T], out: &mut [T]) {
        out[0] = self.q * x[0] + self.qbar * (x[0] - self.s * mean[0]);
    }
    fn dmean(&self, _t: T, x: &[T], mean: &[T], _alpha: &[T], out: &mut [T]) {
        out[0] = -self.qbar * self.s * (x[0] - self.s * mean[0]);
    }
    fn dalpha(&self, _t: T, _x: &[T], _mean: &[T], alpha: &[T], out: &mut [T]) {
        out[0] = self.r * alpha[0];
    }
    fn alpha_closed_form(&self, _t: T, _x: &[T], _mean: &[T], linear: &[T], out: &mut [T]) -> bool {
        out[0] = -linear[0] / self.r;
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqTerminal<T> {
    pub c: T,
    pub cbar: T,
    pub s_t: T,
}

impl<T: Real> MeanFieldTerminal<T> for LqTerminal<T> {
    fn value(&self, x: &[T], mean: &[T]) -> T {
        let u = x[0] - self.s_t * mean[0];
        T::lit(0.5) * (self.c * x[0] * x[0] + self.cbar * u * u)
    }
    fn dx(&self, x: &[T], mean: &[T], out: &mut [T]) {
        out[0] = self.c * x[0] + self.cbar * (x[0] - self.s_t * mean[0]);
    }
    fn dmean(&self, x: &[T], mean: &[T], out: &mut [T]) {
        out[0] = -self.cbar * self.s_t * (x[0] - self.s_t * mean[0]);
    }
}

fn scalar_dynamics<T: Real>(b1: T, b2: T, b3: T, sigma0: T) -> Result<LinearDynamics<T>> {
    let z = T::zero();
    LinearDynamics::constant(DynamicsAt::scalar(z, b1, b2, b3, sigma0, z, z, z))
}

/// Scalar linear-quadratic mean-field model. The control enters the cost as
/// `(r/2)alpha^2`, so the strong-convexity modulus is `r/2`.
pub fn make_lq_scalar<T: Real>(p: &LqParams<T>) -> Result<ModelSpec<T>> {
    if !(p.r > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "r must be positive, got {}",
            p.r
        )));
    }
    for (name, v) in [("q", p.q), ("qbar", p.qbar), ("c", p.c), ("cbar", p.cbar)] {
        if !(v >= T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be nonnegative, got {v}"
            )));
        }
    }
    let running = ThroughMean(LqRunning {
        q: p.q,
        qbar: p.qbar,
        s: p.s,
        r: p.r,
    });
    let terminal = ThroughMean(LqTerminal {
        c: p.c,
        cbar: p.cbar,
        s_t: p.s_t,
    });
    let cost = CostModel::new(running, terminal, p.r * T::lit(0.5));
    ModelSpec::new(
        "lq_scalar",
        scalar_dynamics(p.b1, p.b2, p.b3, p.sigma0)?,
        cost,
        p.horizon,
        vec![p.x0],
    )
}

/// Parameters of the smooth scalar-interaction model
/// `f = (q/2)x^2 + (r/2)alpha^2 + rho(sqrt(1+alpha^2) - 1) + kappa(sqrt(1+(x - s mean)^2) - 1)`,
/// `g = (c/2)x^2 + kappa_t(sqrt(1+(x - s_t mean)^2) - 1)`,
/// with the same dynamics as the linear-quadratic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InteractionParams<T> {
    pub q: T,
    pub r: T,
    pub rho: T,
    pub kappa: T,
    pub s: T,
    pub c: T,
    pub kappa_t: T,
    pub s_t: T,
    pub b1: T,
    pub b2: T,
    pub b3: T,
    pub sigma0: T,
    pub horizon: T,
    pub x0: T,
}

impl<T: Real> InteractionParams<T> {
    pub fn example() -> Self {
        let l = T::lit;
        Self {
            q: l(1.0),
            r: l(1.0),
            rho: l(0.5),
            kappa: l(1.0),
            s: l(1.0),
            c: l(1.0),
            kappa_t: l(0.5),
            s_t: l(1.0),
            b1: l(0.0),
            b2: l(0.5),
            b3: l(1.0),
            sigma0: l(0.3),
            horizon: l(1.0),
            x0: l(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothRunning<T> {
    pub q: T,
    pub r: T,
    pub rho: T,
    pub kappa: T,
    pub s: T,
}

impl<T: Real> MeanFieldRunning<T> for SmoothRunning<T> {
    fn value(&self, _t: T, x: &[T], mean: &[T], alpha: &[T]) -> T {
        let (one, half) = (T::one(), T::lit(0.5));
        let u = x[0] - self.s * mean[0];
        let a = alpha[0];
        half * self.q * x[0] * x[0]
            + half * self.r * a * a
            + self.rho * ((one + a * a).sqrt() - one)
            + self.kappa * ((one + u * u).sqrt() - one)
    }
    fn dx(&self, _t: T, x: &[T], mean: &[T], _alpha: &[T], out: &mut [T]) {
        let u = x[0] - self.s * mean[0];
        out[0] = self.q * x[0] + self.kappa * u / (T::one() + u * u).sqrt();
    }
    fn dmean(&self, _t: T, x: &[T], mean: &[T], _alpha: &[T], out: &mut [T]) {
        let u = x[0] - self.s * mean[0];
        out[0] = -self.s * self.kappa * u / (T::one() + u * u).sqrt();
    }
    fn dalpha(&self, _t: T, _x: &[T], _mean: &[T], alpha: &[T], out: &mut [T]) {
        let a = alpha[0];
        out[0] = self.r * a + self.rho * a / (T::one() + a * a).sqrt();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothTerminal<T> {
    pub c: T,
    pub kappa_t: T,
    pub s_t: T,
}

impl<T: Real> MeanFieldTerminal<T> for SmoothTerminal<T> {
    fn value(&self, x: &[T], mean: &[T]) -> T {
        let u = x[0] - self.s_t * mean[0];
        T::lit(0.5) * self.c * x[0] * x[0] + self.kappa_t * ((T::one() + u * u).sqrt() - T::one())
    }
    fn dx(&self, x: &[T], mean: &[T], out: &mut [T]) {
        let u = x[0] - self.s_t * mean[0];
        out[0] = self.c * x[0] + self.kappa_t * u / (T::one() + u * u).sqrt();
    }
    fn dmean(&self, x: &[T], mean: &[T], out: &mut [T]) {
        let u = x[0] - self.s_t * mean[0];
        out[0] = -self.s_t * self.kappa_t * u / (T::one() + u * u).sqrt();
    }
}

/// Scalar-interaction model without a closed-form control; the minimizer is
/// found by Newton iteration.
pub fn make_scalar_interaction<T: Real>(p: &InteractionParams<T>) -> Result<ModelSpec<T>> {
    if !(p.r > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "r must be positive, got {}",
            p.r
        )));
    }
    for (name, v) in [
        ("q", p.q),
        ("rho", p.rho),
        ("kappa", p.kappa),
        ("c", p.c),
        ("kappa_t", p.kappa_t),
    ] {
        if !(v >= T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be nonnegative, got {v}"
            )));
        }
    }
    let running = ThroughMean(SmoothRunning {
        q: p.q,
        r: p.r,
        rho: p.rho,
        kappa: p.kappa,
        s: p.s,
    });
    let terminal = ThroughMean(SmoothTerminal {
        c: p.c,
        kappa_t: p.kappa_t,
        s_t: p.s_t,
    });
    let cost = CostModel::new(running, terminal, p.r * T::lit(0.5));
    ModelSpec::new(
        "scalar_interaction",
        scalar_dynamics(p.b1, p.b2, p.b3, p.sigma0)?,
        cost,
        p.horizon,
        vec![p.x0],
    )
}

/// Zero cost everywhere; the minimizer is `alpha = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ZeroCost;

impl<T: Real> RunningCost<T> for ZeroCost {
    fn value(&self, _t: T, _x: &[T], _mu: &ParticleCloud<T>, _alpha: &[T]) -> T {
        T::zero()
    }
    fn dx(&self, _t: T, _x: &[T], _mu: &ParticleCloud<T>, _alpha: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
    }
    fn dalpha(&self, _t: T, _x: &[T], _mu: &ParticleCloud<T>, _alpha: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
    }
    fn dmu(
        &self,
        _t: T,
        _x: &[T],
        _mu: &ParticleCloud<T>,
        _alpha: &[T],
        _query: &[T],
        out: &mut [T],
    ) {
        out.iter_mut().for_each(|o| *o = T::zero());
    }
    fn dmu_query_independent(&self) -> bool {
        true
    }
    fn alpha_closed_form(
        &self,
        _t: T,
        _x: &[T],
        _mu: &ParticleCloud<T>,
        _linear: &[T],
        out: &mut [T],
    ) -> bool {
        out.iter_mut().for_each(|o| *o = T::zero());
        true
    }
}

impl<T: Real> TerminalCost<T> for ZeroCost {
    fn value(&self, _x: &[T], _mu: &ParticleCloud<T>) -> T {
        T::zero()
    }
    fn dx(&self, _x: &[T], _mu: &ParticleCloud<T>, out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
    }
    fn dmu(&self, _x: &[T], _mu: &ParticleCloud<T>, _query: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
    }
    fn dmu_query_independent(&self) -> bool {
        true
    }
}

/// Driftless model `dX = sigma0 dW` in `R^d` with zero cost. The control has
/// no effect, so `lambda` is recorded as zero.
pub fn make_zero<T: Real>(d: usize, sigma0: T, horizon: T, x0: Vec<T>) -> Result<ModelSpec<T>> {
    let mut at = DynamicsAt::zeros(d, d, 1);
    for l in 0..d {
        at.s0.set(l, l, sigma0);
    }
    ModelSpec::new(
        "zero",
        LinearDynamics::constant(at)?,
        CostModel::new(ZeroCost, ZeroCost, T::zero()),
        horizon,
        x0,
    )
}

/// Running kernel `fhat(t, x, x', alpha)`; the cost is its average over the
/// atoms `x'` of the measure.
pub trait PairRunningKernel<T: Real>: Send + Sync {
    fn value(&self, t: T, x: &[T], xp: &[T], alpha: &[T]) -> T;
    fn dx(&self, t: T, x: &[T], xp: &[T], alpha: &[T], out: &mut [T]);
    fn dxp(&self, t: T, x: &[T], xp: &[T], alpha: &[T], out: &mut [T]);
    fn dalpha(&self, t: T, x: &[T], xp: &[T], alpha: &[T], out: &mut [T]);
}

/// Terminal kernel `ghat(x, x')`.
pub trait PairTerminalKernel<T: Real>: Send + Sync {
    fn value(&self, x: &[T], xp: &[T]) -> T;
    fn dx(&self, x: &[T], xp: &[T], out: &mut [T]);
    fn dxp(&self, x: &[T], xp: &[T], out: &mut [T]);
}

/// Cost that is linear in the measure: `f(t, x, mu, alpha) = int fhat(t, x, x', alpha) mu(dx')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrder<K>(pub K);

fn average_into<T: Real>(
    mu: &ParticleCloud<T>,
    out: &mut [T],
    mut each: impl FnMut(&[T], &mut [T]),
) {
    let mut buf = vec![T::zero(); out.len()];
    out.iter_mut().for_each(|o| *o = T::zero());
    for xp in mu.points() {
        each(xp, &mut buf);
        out.iter_mut().zip(&buf).for_each(|(o, &b)| *o = *o + b);
    }
    let mf = T::from_usize_lossy(mu.len());
    out.iter_mut().for_each(|o| *o = *o / mf);
}

impl<T: Real, K: PairRunningKernel<T>> RunningCost<T> for FirstOrder<K> {
    fn value(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T]) -> T {
        let s: T = mu.points().map(|xp| self.0.value(t, x, xp, alpha)).sum();
        s / T::from_usize_lossy(mu.len())
    }
    fn dx(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], out: &mut [T]) {
        average_into(mu, out, |xp, buf| self.0.dx(t, x, xp, alpha, buf));
    }
    fn dalpha(&self, t: T, x: &[T], mu: &ParticleCloud<T>, alpha: &[T], out: &mut [T]) {
        average_into(mu, out, |xp, buf| self.0.dalpha(t, x, xp, alpha, buf));
    }
    fn dmu(&self, t: T, x: &[T], _mu: &ParticleCloud<T>, alpha: &[T], query: &[T], out: &mut [T]) {
        self.0.dxp(t, x, query, alpha, out);
    }
}

impl<T: Real, K: PairTerminalKernel<T>> TerminalCost<T> for FirstOrder<K> {
    fn value(&self, x: &[T], mu: &ParticleCloud<T>) -> T {
        let s: T = mu.points().map(|xp| self.0.value(x, xp)).sum();
        s / T::from_usize_lossy(mu.len())
    }
    fn dx(&self, x: &[T], mu: &ParticleCloud<T>, out: &mut [T]) {
        average_into(mu, out, |xp, buf| self.0.dx(x, xp, buf));
    }
    fn dmu(&self, x: &[T], _mu: &ParticleCloud<T>, query: &[T], out: &mut [T]) {
        self.0.dxp(x, query, out);
    }
}

type KernelFn<T> = dyn Fn(T, &[T], &[T], &[T]) -> Vec<T> + Send + Sync;

/// Dynamics kernels `bhat(t, x, x', alpha)` in `R^d` and
/// `sigmahat(t, x, x', alpha)` in `d x m` (row-major).
#[derive(Clone)]
pub struct DynamicsKernels<T> {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub drift: Arc<KernelFn<T>>,
    pub vol: Arc<KernelFn<T>>,
}

impl<T: Real> DynamicsKernels<T> {
    pub fn new<B, S>(d: usize, m: usize, k: usize, drift: B, vol: S) -> Self
    where
        B: Fn(T, &[T], &[T], &[T]) -> Vec<T> + Send + Sync + 'static,
        S: Fn(T, &[T], &[T], &[T]) -> Vec<T> + Send + Sync + 'static,
    {
        Self {
            d,
            m,
            k,
            drift: Arc::new(drift),
            vol: Arc::new(vol),
        }
    }

    /// Reads off the affine coefficients at time `t` by evaluating the kernels
    /// at the origin and at unit vectors.
    fn coefficients_at(&self, t: T) -> DynamicsAt<T> {
        let (d, m, k) = (self.d, self.m, self.k);
        let zd = vec![T::zero(); d];
        let zk = vec![T::zero(); k];
        let unit = |n: usize, l: usize| {
            let mut e = vec![T::zero(); n];
            e[l] = T::one();
            e
        };
        let mut at = DynamicsAt::zeros(d, m, k);
        at.b0 = (self.drift)(t, &zd, &zd, &zk);
        at.s0 = Matrix::from_vec(d, m, (self.vol)(t, &zd, &zd, &zk));
        let diff = |v: Vec<T>, base: &[T]| -> Vec<T> {
            v.iter().zip(base).map(|(&a, &b)| a - b).collect()
        };
        for l in 0..d {
            let e = unit(d, l);
            let bx = diff((self.drift)(t, &e, &zd, &zk), &at.b0);
            let bxp = diff((self.drift)(t, &zd, &e, &zk), &at.b0);
            for r in 0..d {
                at.b2.set(r, l, bx[r]);
                at.b1.set(r, l, bxp[r]);
            }
            at.s2[l] = Matrix::from_vec(d, m, diff((self.vol)(t, &e, &zd, &zk), at.s0.as_slice()));
            at.s1[l] = Matrix::from_vec(d, m, diff((self.vol)(t, &zd, &e, &zk), at.s0.as_slice()));
        }
        for j in 0..k {
            let e = unit(k, j);
            let ba = diff((self.drift)(t, &zd, &zd, &e), &at.b0);
            for r in 0..d {
                at.b3.set(r, j, ba[r]);
            }
            at.s3[j] = Matrix::from_vec(d, m, diff((self.vol)(t, &zd, &zd, &e), at.s0.as_slice()));
        }
        at
    }
}

/// First-order interaction model. The dynamics kernels must be affine in
/// `(x, x', alpha)`; averaging them over the measure then gives linear
/// dynamics driven by the mean. Affinity is probed at random points and
/// times and anything else is rejected.
#[allow(clippy::too_many_arguments)]
pub fn make_first_order<T, F, G>(
    kernels: DynamicsKernels<T>,
    running: F,
    terminal: G,
    lambda: T,
    horizon: T,
    x0: Vec<T>,
    probe_seed: u64,
) -> Result<ModelSpec<T>>
where
    T: Real,
    F: PairRunningKernel<T> + 'static,
    G: PairTerminalKernel<T> + 'static,
{
    let (d, m, k) = (kernels.d, kernels.m, kernels.k);
    if d == 0 || m == 0 || k == 0 {
        return Err(Error::Dimension("d, m and k must be positive".into()));
    }
    let mut rng = stream_rng(probe_seed, 0);
    let mut normal = |n: usize, scale: f64| -> Vec<T> {
        (0..n)
            .map(|_| T::lit(scale * std_normal(&mut rng)))
            .collect::<Vec<T>>()
    };
    let mut probe_rng = stream_rng(probe_seed, 1);
    for _ in 0..16 {
        let t = horizon * T::lit(probe_rng.random::<f64>());
        let (x, xp, a) = (normal(d, 2.0), normal(d, 2.0), normal(k, 2.0));
        let at = kernels.coefficients_at(t);
        if at.b0.len() != d || at.s0.rows() * at.s0.cols() != d * m {
            return Err(Error::Dimension(
                "kernel output size does not match d, m".into(),
            ));
        }
        let mut b = vec![T::zero(); d];
        at.drift_into(&x, &xp, &a, &mut b);
        let mut s = vec![T::zero(); d * m];
        at.vol_into(&x, &xp, &a, &mut s);
        let kb = (kernels.drift)(t, &x, &xp, &a);
        let ks = (kernels.vol)(t, &x, &xp, &a);
        let scale = T::one()
            + [&x, &xp, &a]
                .iter()
                .flat_map(|v| v.iter())
                .fold(T::zero(), |acc, v| acc.max(v.abs()))
                * (at.b1.max_abs() + at.b2.max_abs() + at.b3.max_abs() + T::one());
        let tol = T::epsilon().sqrt() * scale;
        let bad_b = kb.iter().zip(&b).any(|(&p, &q)| (p - q).abs() > tol);
        let bad_s = ks.iter().zip(&s).any(|(&p, &q)| (p - q).abs() > tol);
        if bad_b || bad_s {
            let which = if bad_b { "drift" } else { "volatility" };
            return Err(Error::NonAffineKernel(format!(
                "{which} kernel is not affine in (x, x', alpha) near t={t}"
            )));
        }
    }
    let source = kernels.clone();
    let dynamics = LinearDynamics::time_varying(d, m, k, move |t| source.coefficients_at(t));
    dynamics.sample(&[T::zero(), horizon])?;
    ModelSpec::new(
        "first_order",
        dynamics,
        CostModel::new(FirstOrder(running), FirstOrder(terminal), lambda),
        horizon,
        x0,
    )
}

/// Quadratic first-order kernels
/// `fhat = (q/2)|x|^2 + (qbar/2)|x - x'|^2 + (r/2)|alpha|^2` and
/// `ghat = (c/2)|x|^2 + (cbar/2)|x - x'|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticPairKernel<T> {
    pub q: T,
    pub qbar: T,
    pub r: T,
}

impl<T: Real> PairRunningKernel<T> for QuadraticPairKernel<T> {
    fn value(&self, _t: T, x: &[T], xp: &[T], alpha: &[T]) -> T {
        let half = T::lit(0.5);
        let xx = dot(x, x);
        let dd: T = x.iter().zip(xp).map(|(&a, &b)| (a - b) * (a - b)).sum();
        half * (self.q * xx + self.qbar * dd + self.r * dot(alpha, alpha))
    }
    fn dx(&self, _t: T, x: &[T], xp: &[T], _alpha: &[T], out: &mut [T]) {
        for ((o, &a), &b) in out.iter_mut().zip(x).zip(xp) {
            *o = self.q * a + self.qbar * (a - b);
        }
    }
    fn dxp(&self, _t: T, x: &[T], xp: &[T], _alpha: &[T], out: &mut [T]) {
        for ((o, &a), &b) in out.iter_mut().zip(x).zip(xp) {
            *o = -self.qbar * (a - b);
        }
    }
    fn dalpha(&self, _t: T, _x: &[T], _xp: &[T], alpha: &[T], out: &mut [T]) {
        for (o, &a) in out.iter_mut().zip(alpha) {
            *o = self.r * a;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticPairTerminal<T> {
    pub c: T,
    pub cbar: T,
}

impl<T: Real> PairTerminalKernel<T> for QuadraticPairTerminal<T> {
    fn value(&self, x: &[T], xp: &[T]) -> T {
        let dd: T = x.iter().zip(xp).map(|(&a, &b)| (a - b) * (a - b)).sum();
        T::lit(0.5) * (self.c * dot(x, x) + self.cbar * dd)
    }
    fn dx(&self, x: &[T], xp: &[T], out: &mut [T]) {
        for ((o, &a), &b) in out.iter_mut().zip(x).zip(xp) {
            *o = self.c * a + self.cbar * (a - b);
        }
    }
    fn dxp(&self, x: &[T], xp: &[T], out: &mut [T]) {
        for ((o, &a), &b) in out.iter_mut().zip(x).zip(xp) {
            *o = -self.cbar * (a - b);
        }
    }
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Outcome of one numerical assumption check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed quantity: a quotient, a margin or a relative error
    /// depending on the check.
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub probes: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Relative error bound for derivative consistency checks.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-5;

struct Probe<T> {
    t: T,
    x: Vec<T>,
    alpha: Vec<T>,
    cloud: ParticleCloud<T>,
}

fn random_probe<T: Real, R: Rng>(spec: &ModelSpec<T>, rng: &mut R, atoms: usize) -> Probe<T> {
    let mut gauss = |c: T| c + T::lit(std_normal(rng));
    let x: Vec<T> = spec.x0.iter().map(|&c| gauss(c)).collect();
    let alpha: Vec<T> = (0..spec.k).map(|_| gauss(T::zero())).collect();
    let pts: Vec<T> = (0..atoms)
        .flat_map(|_| spec.x0.clone())
        .map(&mut gauss)
        .collect();
    let t = spec.horizon * T::lit(rng.random::<f64>());
    Probe {
        t,
        x,
        alpha,
        cloud: ParticleCloud::from_flat(spec.d, pts).expect("finite probe cloud"),
    }
}

fn rel_err<T: Real>(fd: T, an: T) -> f64 {
    ((fd - an).abs() / (T::one().max(an.abs()))).as_f64()
}

/// Numerical spot-check of the standing assumptions: Lipschitz quotients of
/// `f` and `g`, joint convexity with modulus `lambda` in the control, and
/// consistency of every derivative field with central differences.
pub fn validate_assumptions<T: Real>(
    spec: &ModelSpec<T>,
    probes: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if probes == 0 {
        return Err(Error::InvalidParameter("probes must be at least 1".into()));
    }
    const ATOMS: usize = 8;
    let (d, k) = (spec.d, spec.k);
    let f = spec.cost.running.as_ref();
    let g = spec.cost.terminal.as_ref();
    let lambda = spec.cost.lambda;
    let h = T::epsilon().cbrt();
    let mut rng = stream_rng(seed, 0);

    let mut lip_f = 0.0f64;
    let mut lip_g = 0.0f64;
    let mut conv_f = f64::INFINITY;
    let mut conv_g = f64::INFINITY;
    let mut conv_f_ok = true;
    let mut conv_g_ok = true;
    let (mut e_fx, mut e_fa, mut e_fmu, mut e_gx, mut e_gmu) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);

    let mut bx = vec![T::zero(); d];
    let mut ba = vec![T::zero(); k];
    for _ in 0..probes {
        let p = random_probe(spec, &mut rng, ATOMS);
        let q = random_probe(spec, &mut rng, ATOMS);
        // Second cloud coupled index-wise with the first.
        let shift: Vec<T> = (0..ATOMS * d)
            .map(|_| T::lit(0.5 * std_normal(&mut rng)))
            .collect();
        let moved: Vec<T> = p
            .cloud
            .as_flat()
            .iter()
            .zip(&shift)
            .map(|(&a, &b)| a + b)
            .collect();
        let cloud2 = ParticleCloud::from_flat(d, moved).expect("finite probe cloud");
        let t = p.t;

        let f1 = f.value(t, &p.x, &p.cloud, &p.alpha);
        let f2 = f.value(t, &q.x, &cloud2, &q.alpha);
        let g1 = g.value(&p.x, &p.cloud);
        let g2 = g.value(&q.x, &cloud2);

        let dx: Vec<T> = q.x.iter().zip(&p.x).map(|(&a, &b)| a - b).collect();
        let da: Vec<T> = q.alpha.iter().zip(&p.alpha).map(|(&a, &b)| a - b).collect();
        let coupling = (dot(&shift, &shift) / T::from_usize_lossy(ATOMS)).sqrt();
        let growth = T::one()
            + dot(&p.x, &p.x).sqrt()
            + dot(&q.x, &q.x).sqrt()
            + dot(&p.alpha, &p.alpha).sqrt()
            + dot(&q.alpha, &q.alpha).sqrt()
            + p.cloud.norm2()
            + cloud2.norm2();
        let dist_f = dot(&dx, &dx).sqrt() + dot(&da, &da).sqrt() + coupling;
        let dist_g = dot(&dx, &dx).sqrt() + coupling;
        if dist_f > T::zero() {
            lip_f = lip_f.max(((f2 - f1).abs() / (growth * dist_f)).as_f64());
        }
        if dist_g > T::zero() {
            lip_g = lip_g.max(((g2 - g1).abs() / (growth * dist_g)).as_f64());
        }

        // Convexity along the coupling (x, mu, alpha) -> (x', mu', alpha').
        f.dx(t, &p.x, &p.cloud, &p.alpha, &mut bx);
        f.dalpha(t, &p.x, &p.cloud, &p.alpha, &mut ba);
        let mut lin = dot(&bx, &dx) + dot(&ba, &da);
        let mut gmu = vec![T::zero(); d];
        let mut lin_mu = T::zero();
        for j in 0..ATOMS {
            f.dmu(t, &p.x, &p.cloud, &p.alpha, p.cloud.point(j), &mut gmu);
            lin_mu = lin_mu + dot(&gmu, &shift[j * d..(j + 1) * d]);
        }
        lin = lin + lin_mu / T::from_usize_lossy(ATOMS);
        let margin = f2 - f1 - lin - lambda * dot(&da, &da);
        let tol = T::lit(1e-9) * (T::one() + f1.abs() + f2.abs());
        conv_f = conv_f.min(margin.as_f64());
        conv_f_ok &= margin >= -tol;

        g.dx(&p.x, &p.cloud, &mut bx);
        let mut lin = dot(&bx, &dx);
        let mut lin_mu = T::zero();
        for j in 0..ATOMS {
            g.dmu(&p.x, &p.cloud, p.cloud.point(j), &mut gmu);
            lin_mu = lin_mu + dot(&gmu, &shift[j * d..(j + 1) * d]);
        }
        lin = lin + lin_mu / T::from_usize_lossy(ATOMS);
        let margin = g2 - g1 - lin;
        let tol = T::lit(1e-9) * (T::one() + g1.abs() + g2.abs());
        conv_g = conv_g.min(margin.as_f64());
        conv_g_ok &= margin >= -tol;

        // Derivative consistency.
        f.dx(t, &p.x, &p.cloud, &p.alpha, &mut bx);
        g.dx(&p.x, &p.cloud, &mut gmu);
        for l in 0..d {
            let step = h * (T::one() + p.x[l].abs());
            let mut xp = p.x.clone();
            let mut xm = p.x.clone();
            xp[l] = xp[l] + step;
            xm[l] = xm[l] - step;
            let fd = (f.value(t, &xp, &p.cloud, &p.alpha) - f.value(t, &xm, &p.cloud, &p.alpha))
                / (step + step);
            e_fx = e_fx.max(rel_err(fd, bx[l]));
            let fd = (g.value(&xp, &p.cloud) - g.value(&xm, &p.cloud)) / (step + step);
            e_gx = e_gx.max(rel_err(fd, gmu[l]));
        }
        f.dalpha(t, &p.x, &p.cloud, &p.alpha, &mut ba);
        for j in 0..k {
            let step = h * (T::one() + p.alpha[j].abs());
            let mut ap = p.alpha.clone();
            let mut am = p.alpha.clone();
            ap[j] = ap[j] + step;
            am[j] = am[j] - step;
            let fd =
                (f.value(t, &p.x, &p.cloud, &ap) - f.value(t, &p.x, &p.cloud, &am)) / (step + step);
            e_fa = e_fa.max(rel_err(fd, ba[j]));
        }
        let mf = T::from_usize_lossy(ATOMS);
        let mut fmu = vec![T::zero(); d];
        for j in 0..ATOMS {
            f.dmu(t, &p.x, &p.cloud, &p.alpha, p.cloud.point(j), &mut fmu);
            g.dmu(&p.x, &p.cloud, p.cloud.point(j), &mut gmu);
            for l in 0..d {
                let c = p.cloud.point(j)[l];
                let step = h * (T::one() + c.abs());
                let mut up = p.cloud.point(j).to_vec();
                let mut dn = up.clone();
                up[l] = c + step;
                dn[l] = c - step;
                let cp = p.cloud.with_point(j, &up);
                let cm = p.cloud.with_point(j, &dn);
                let fd = (f.value(t, &p.x, &cp, &p.alpha) - f.value(t, &p.x, &cm, &p.alpha))
                    / (step + step);
                e_fmu = e_fmu.max(rel_err(fd * mf, fmu[l]));
                let fd = (g.value(&p.x, &cp) - g.value(&p.x, &cm)) / (step + step);
                e_gmu = e_gmu.max(rel_err(fd * mf, gmu[l]));
            }
        }
    }

    let deriv = |name: &str, worst: f64| AssumptionCheck {
        name: name.into(),
        passed: worst <= DERIVATIVE_TOLERANCE,
        worst,
    };
    Ok(AssumptionReport {
        probes,
        checks: vec![
            AssumptionCheck {
                name: "lipschitz_f".into(),
                passed: lip_f.is_finite(),
                worst: lip_f,
            },
            AssumptionCheck {
                name: "lipschitz_g".into(),
                passed: lip_g.is_finite(),
                worst: lip_g,
            },
            AssumptionCheck {
                name: "convexity_f".into(),
                passed: conv_f_ok,
                worst: conv_f,
            },
            AssumptionCheck {
                name: "convexity_g".into(),
                passed: conv_g_ok,
                worst: conv_g,
            },
            deriv("dx_f", e_fx),
            deriv("dalpha_f", e_fa),
            deriv("dmu_f", e_fmu),
            deriv("dx_g", e_gx),
            deriv("dmu_g", e_gmu),
        ],
    })
}
