//! The Hamiltonian `H = b.y + sigma.z + f`, its derivatives, and its
//! minimizer in the control.
//!
//! `sigma.z` is the Frobenius pairing of `d x m` matrices; `z` is stored
//! row-major everywhere.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve, frobenius};
use crate::measure::ParticleCloud;
use crate::model::{CostModel, DynamicsAt, ModelSpec};
use crate::scalar::{dot, Real, PAR_CHUNK};

/// Arguments of the Hamiltonian.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianPoint<'a, T> {
    pub t: T,
    pub x: &'a [T],
    pub cloud: &'a ParticleCloud<T>,
    pub y: &'a [T],
    pub z: &'a [T],
    pub alpha: &'a [T],
}

impl<'a, T: Real> HamiltonianPoint<'a, T> {
    fn check(&self, spec: &ModelSpec<T>) -> Result<()> {
        let (d, m, k) = (spec.d, spec.m, spec.k);
        if self.x.len() != d || self.y.len() != d || self.z.len() != d * m || self.alpha.len() != k
        {
            return Err(Error::Dimension(format!(
                "hamiltonian point does not match d={d}, m={m}, k={k}"
            )));
        }
        if self.cloud.dim() != d {
            return Err(Error::Dimension(format!(
                "cloud in R^{}, model in R^{d}",
                self.cloud.dim()
            )));
        }
        Ok(())
    }
}

/// Newton settings for the control minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for NewtonConfig<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-10).max(T::lit(64.0) * T::epsilon()),
            max_iter: 50,
        }
    }
}

/// `H` with precomputed coefficients.
pub fn hamiltonian_at<T: Real>(
    c: &DynamicsAt<T>,
    cost: &CostModel<T>,
    p: &HamiltonianPoint<'_, T>,
) -> T {
    let d = p.x.len();
    let mut b = vec![T::zero(); d];
    c.drift_into(p.x, p.cloud.mean(), p.alpha, &mut b);
    let mut s = vec![T::zero(); p.z.len()];
    c.vol_into(p.x, p.cloud.mean(), p.alpha, &mut s);
    dot(&b, p.y) + frobenius(&s, p.z) + cost.running.value(p.t, p.x, p.cloud, p.alpha)
}

pub fn hamiltonian<T: Real>(spec: &ModelSpec<T>, p: &HamiltonianPoint<'_, T>) -> Result<T> {
    p.check(spec)?;
    Ok(hamiltonian_at(&spec.dynamics.at(p.t), &spec.cost, p))
}

/// `d_alpha H = d_alpha f + b3^T y + s3^T z`.
pub fn dalpha_hamiltonian_at<T: Real>(
    c: &DynamicsAt<T>,
    cost: &CostModel<T>,
    p: &HamiltonianPoint<'_, T>,
    out: &mut [T],
) {
    cost.running.dalpha(p.t, p.x, p.cloud, p.alpha, out);
    c.alpha_pairing_acc(p.y, p.z, out);
}

/// Unique minimizer of `alpha -> H(t, x, mu, y, z, alpha)` with precomputed
/// coefficients. `start` seeds the Newton iteration when no closed form is
/// available.
#[allow(clippy::too_many_arguments)]
pub fn minimize_alpha_at<T: Real>(
    c: &DynamicsAt<T>,
    cost: &CostModel<T>,
    t: T,
    x: &[T],
    cloud: &ParticleCloud<T>,
    y: &[T],
    z: &[T],
    cfg: &NewtonConfig<T>,
    start: Option<&[T]>,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); c.k()];
    minimize_alpha_into(c, cost, t, x, cloud, y, z, cfg, start, &mut out)?;
    Ok(out)
}

/// [`minimize_alpha_at`] writing into `out`.
#[allow(clippy::too_many_arguments)]
pub fn minimize_alpha_into<T: Real>(
    c: &DynamicsAt<T>,
    cost: &CostModel<T>,
    t: T,
    x: &[T],
    cloud: &ParticleCloud<T>,
    y: &[T],
    z: &[T],
    cfg: &NewtonConfig<T>,
    start: Option<&[T]>,
    out: &mut [T],
) -> Result<()> {
    let k = c.k();
    let mut small = [T::zero(); 8];
    let mut large: Vec<T>;
    let linear: &mut [T] = if k <= 8 {
        &mut small[..k]
    } else {
        large = vec![T::zero(); k];
        &mut large
    };
    c.alpha_pairing(y, z, linear);
    if cost.running.alpha_closed_form(t, x, cloud, linear, out) {
        return Ok(());
    }
    let linear: &[T] = linear;
    if !(cost.lambda > T::zero()) {
        return Err(Error::InvalidParameter(
            "Newton minimization needs a positive convexity modulus".into(),
        ));
    }
    let f = cost.running.as_ref();
    let objective = |a: &[T]| f.value(t, x, cloud, a) + dot(linear, a);
    let gradient = |a: &[T], out: &mut [T]| {
        f.dalpha(t, x, cloud, a, out);
        out.iter_mut().zip(linear).for_each(|(o, &l)| *o = *o + l);
    };
    let floor = cost.lambda + cost.lambda;
    let mut alpha = start
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![T::zero(); k]);
    let mut grad = vec![T::zero(); k];
    let mut gp = vec![T::zero(); k];
    let mut gm = vec![T::zero(); k];
    let mut hess = vec![T::zero(); k * k];
    let h0 = T::epsilon().cbrt();
    let mut residual = T::infinity();
    for _ in 0..=cfg.max_iter {
        gradient(&alpha, &mut grad);
        residual = dot(&grad, &grad).sqrt();
        if !residual.is_finite() {
            break;
        }
        if residual <= cfg.tol {
            out.copy_from_slice(&alpha);
            return Ok(());
        }
        for j in 0..k {
            let step = h0 * (T::one() + alpha[j].abs());
            let mut a = alpha.clone();
            a[j] = alpha[j] + step;
            gradient(&a, &mut gp);
            a[j] = alpha[j] - step;
            gradient(&a, &mut gm);
            for r in 0..k {
                hess[r * k + j] = (gp[r] - gm[r]) / (step + step);
            }
        }
        for r in 0..k {
            for j in 0..r {
                let v = T::lit(0.5) * (hess[r * k + j] + hess[j * k + r]);
                hess[r * k + j] = v;
                hess[j * k + r] = v;
            }
        }
        let mut dir: Vec<T> = grad.iter().map(|&g| -g).collect();
        let mut factor = hess.clone();
        if cholesky_in_place(&mut factor, k, T::epsilon().sqrt()) {
            cholesky_solve(&factor, k, &mut dir, 1);
        } else {
            dir.iter_mut().for_each(|v| *v = *v / floor);
        }
        let phi0 = objective(&alpha);
        let slack = T::lit(16.0) * T::epsilon() * (T::one() + phi0.abs());
        let mut step = T::one();
        let mut trial = vec![T::zero(); k];
        loop {
            for j in 0..k {
                trial[j] = alpha[j] + step * dir[j];
            }
            let phi = objective(&trial);
            if phi.is_finite() && phi <= phi0 + slack {
                break;
            }
            step = step * T::lit(0.5);
            if step < T::lit(1e-12) {
                return Err(Error::NewtonFailure {
                    residual: residual.as_f64(),
                });
            }
        }
        alpha.copy_from_slice(&trial);
    }
    Err(Error::NewtonFailure {
        residual: residual.as_f64(),
    })
}

/// Unique minimizer `alpha_hat(t, x, mu, y, z)` of the Hamiltonian.
pub fn minimize_alpha<T: Real>(
    spec: &ModelSpec<T>,
    t: T,
    x: &[T],
    cloud: &ParticleCloud<T>,
    y: &[T],
    z: &[T],
) -> Result<Vec<T>> {
    let alpha = vec![T::zero(); spec.k];
    HamiltonianPoint {
        t,
        x,
        cloud,
        y,
        z,
        alpha: &alpha,
    }
    .check(spec)?;
    minimize_alpha_at(
        &spec.dynamics.at(t),
        &spec.cost,
        t,
        x,
        cloud,
        y,
        z,
        &NewtonConfig::default(),
        None,
    )
}

/// `d_x H` and the measure-derivative field `d_mu H(...)(x')` at each query.
pub fn dx_dmu_hamiltonian<T: Real>(
    spec: &ModelSpec<T>,
    p: &HamiltonianPoint<'_, T>,
    queries: &ParticleCloud<T>,
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    p.check(spec)?;
    if queries.dim() != spec.d {
        return Err(Error::Dimension("query cloud dimension".into()));
    }
    let c = spec.dynamics.at(p.t);
    let d = spec.d;
    let mut dx = vec![T::zero(); d];
    c.x_pairing(p.y, p.z, &mut dx);
    let mut buf = vec![T::zero(); d];
    spec.cost.running.dx(p.t, p.x, p.cloud, p.alpha, &mut buf);
    dx.iter_mut().zip(&buf).for_each(|(o, &v)| *o = *o + v);
    let mut base = vec![T::zero(); d];
    c.mean_pairing(p.y, p.z, &mut base);
    let fields = queries
        .points()
        .map(|q| {
            spec.cost
                .running
                .dmu(p.t, p.x, p.cloud, p.alpha, q, &mut buf);
            base.iter().zip(&buf).map(|(&a, &b)| a + b).collect()
        })
        .collect();
    Ok((dx, fields))
}

/// Adjoint driver at one time step for every particle:
/// `d_x H(Theta_i) + (1/M) sum_j d_mu H(Theta_j)(X_i)`, written into `out`
/// (`M * d`). `ys`, `zs`, `alphas` hold the per-particle `Y`, `Z`, `alpha`.
pub fn adjoint_driver<T: Real>(
    c: &DynamicsAt<T>,
    cost: &CostModel<T>,
    t: T,
    cloud: &ParticleCloud<T>,
    ys: &[T],
    zs: &[T],
    alphas: &[T],
    out: &mut [T],
) {
    let (mm, d) = (cloud.len(), cloud.dim());
    let dm = zs.len() / mm;
    let k = alphas.len() / mm;
    cost.running.dmu_cross_average(t, cloud, alphas, out);
    // Linear dynamics contribute the constant field b1^T mean(Y) + s1^T mean(Z).
    let mf = T::from_usize_lossy(mm);
    let mut ybar = vec![T::zero(); d];
    let mut zbar = vec![T::zero(); dm];
    for i in 0..mm {
        ybar.iter_mut()
            .zip(&ys[i * d..(i + 1) * d])
            .for_each(|(a, &v)| *a = *a + v);
        zbar.iter_mut()
            .zip(&zs[i * dm..(i + 1) * dm])
            .for_each(|(a, &v)| *a = *a + v);
    }
    ybar.iter_mut().for_each(|v| *v = *v / mf);
    zbar.iter_mut().for_each(|v| *v = *v / mf);
    let mut shift = vec![T::zero(); d];
    c.mean_pairing(&ybar, &zbar, &mut shift);
    out.par_chunks_mut(d)
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); d],
            |b, (i, row)| {
                let x = cloud.point(i);
                cost.running.dx(t, x, cloud, &alphas[i * k..(i + 1) * k], b);
                for l in 0..d {
                    row[l] = row[l] + shift[l] + b[l];
                }
                c.x_pairing_acc(&ys[i * d..(i + 1) * d], &zs[i * dm..(i + 1) * dm], row);
            },
        );
}

/// Terminal adjoint value `d_x g(X_i) + (1/M) sum_j d_mu g(X_j)(X_i)` for
/// every atom, written into `out` (`M * d`).
pub fn terminal_adjoint<T: Real>(cost: &CostModel<T>, cloud: &ParticleCloud<T>, out: &mut [T]) {
    let d = cloud.dim();
    cost.terminal.dmu_cross_average(cloud, out);
    out.par_chunks_mut(d)
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); d],
            |b, (i, row)| {
                cost.terminal.dx(cloud.point(i), cloud, b);
                row.iter_mut().zip(b.iter()).for_each(|(o, &v)| *o = *o + v);
            },
        );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lq_scalar, make_zero, LqParams};

    fn unit_lq() -> ModelSpec<f64> {
        make_lq_scalar(&LqParams {
            q: 1.0,
            qbar: 0.0,
            r: 1.0,
            b1: 1.0,
            b2: 1.0,
            b3: 1.0,
            sigma0: 1.0,
            ..LqParams::benchmark()
        })
        .unwrap()
    }

    #[test]
    fn zero_model_hamiltonian_vanishes() {
        let spec = make_zero(1, 0.0, 1.0, vec![0.0]).unwrap();
        let cloud = ParticleCloud::from_scalars(&[0.5, -1.0]).unwrap();
        let p = HamiltonianPoint {
            t: 0.0,
            x: &[0.3],
            cloud: &cloud,
            y: &[1.0],
            z: &[2.0],
            alpha: &[0.7],
        };
        assert_eq!(hamiltonian(&spec, &p).unwrap(), 0.0);
        let (dx, dmu) = dx_dmu_hamiltonian(&spec, &p, &cloud).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(dmu, vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn lq_hand_value() {
        let spec = unit_lq();
        let cloud = ParticleCloud::from_scalars(&[1.0]).unwrap();
        let p = HamiltonianPoint {
            t: 0.0,
            x: &[1.0],
            cloud: &cloud,
            y: &[1.0],
            z: &[1.0],
            alpha: &[1.0],
        };
        assert!((hamiltonian(&spec, &p).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn lq_closed_form_minimizer() {
        let spec = unit_lq();
        let cloud = ParticleCloud::from_scalars(&[0.0]).unwrap();
        let a = minimize_alpha(&spec, 0.0, &[0.4], &cloud, &[2.0], &[0.0]).unwrap();
        assert_eq!(a, vec![-2.0]);
        let a = minimize_alpha(&spec, 0.0, &[0.4], &cloud, &[0.0], &[0.0]).unwrap();
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn dimension_errors() {
        let spec = unit_lq();
        let cloud = ParticleCloud::from_scalars(&[0.0]).unwrap();
        assert!(minimize_alpha(&spec, 0.0, &[0.4, 1.0], &cloud, &[2.0], &[0.0]).is_err());
    }
}
