//! Least-squares regression on polynomial features of the state, used for
//! conditional expectations in the backward sweeps and for decoupling-field
//! fits.
//!
//! Features are monomials of total degree `<= degree` in standardised
//! coordinates. Coordinates whose spread across the cloud is negligible are
//! dropped before fitting; the fit then degenerates gracefully to lower
//! dimension (constant-only for a point cloud).

use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::scalar::Real;

pub const MAX_DEGREE: usize = 3;

/// Fitted linear map from polynomial features of `x in R^d` to `R^q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit<T> {
    dim: usize,
    outputs: usize,
    active: Vec<usize>,
    center: Vec<T>,
    scale: Vec<T>,
    exponents: Vec<Vec<u8>>,
    /// `features x outputs`, row-major.
    coef: Vec<T>,
}

fn exponent_table(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; vars]];
    for total in 1..=degree {
        let mut current = vec![0u8; vars];
        fill_exponents(vars, total, 0, &mut current, &mut out);
    }
    out
}

fn fill_exponents(
    vars: usize,
    remaining: usize,
    pos: usize,
    cur: &mut Vec<u8>,
    out: &mut Vec<Vec<u8>>,
) {
    if pos + 1 == vars {
        cur[pos] = remaining as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        cur[pos] = e as u8;
        fill_exponents(vars, remaining - e, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

impl<T: Real> LinearFit<T> {
    /// Fits `targets` (`M x q`) on features of `xs` (`M x d`).
    /// `step` only labels the error.
    pub fn fit(
        degree: usize,
        xs: &[T],
        dim: usize,
        targets: &[T],
        outputs: usize,
        step: usize,
    ) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "regression degree {degree} exceeds {MAX_DEGREE}"
            )));
        }
        let m = xs.len() / dim;
        assert_eq!(targets.len(), m * outputs);
        let mf = T::from_usize_lossy(m);

        let mut mean = vec![T::zero(); dim];
        for x in xs.chunks_exact(dim) {
            for (a, &v) in mean.iter_mut().zip(x) {
                *a = *a + v;
            }
        }
        mean.iter_mut().for_each(|a| *a = *a / mf);
        let mut var = vec![T::zero(); dim];
        for x in xs.chunks_exact(dim) {
            for c in 0..dim {
                let e = x[c] - mean[c];
                var[c] = var[c] + e * e;
            }
        }
        let tol = T::lit(0.01) * T::epsilon().sqrt();
        let mut active = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for c in 0..dim {
            let sd = (var[c] / mf).sqrt();
            if degree > 0 && sd > tol * (T::one() + mean[c].abs()) {
                active.push(c);
                center.push(mean[c]);
                scale.push(sd);
            }
        }
        let exponents = exponent_table(active.len(), if active.is_empty() { 0 } else { degree });
        let p = exponents.len();

        let mut fit = Self {
            dim,
            outputs,
            active,
            center,
            scale,
            exponents,
            coef: vec![T::zero(); p * outputs],
        };

        let mut gram = vec![T::zero(); p * p];
        let mut rhs = vec![T::zero(); p * outputs];
        let mut phi = vec![T::zero(); p];
        for (x, y) in xs.chunks_exact(dim).zip(targets.chunks_exact(outputs)) {
            fit.features(x, &mut phi);
            for a in 0..p {
                let pa = phi[a];
                for b in 0..=a {
                    gram[a * p + b] = gram[a * p + b] + pa * phi[b];
                }
                for (r, &yv) in rhs[a * outputs..(a + 1) * outputs].iter_mut().zip(y) {
                    *r = *r + pa * yv;
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[b * p + a] = gram[a * p + b];
            }
        }
        if !cholesky_in_place(&mut gram, p, T::lit(1e3) * T::epsilon()) {
            return Err(Error::SingularRegression { step });
        }
        cholesky_solve(&gram, p, &mut rhs, outputs);
        fit.coef = rhs;
        Ok(fit)
    }

    /// Whether some state coordinates were dropped for lack of spread.
    pub fn is_reduced(&self) -> bool {
        self.active.len() < self.dim
    }

    pub fn feature_count(&self) -> usize {
        self.exponents.len()
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn coefficients(&self) -> &[T] {
        &self.coef
    }

    fn features(&self, x: &[T], phi: &mut [T]) {
        let mut z = [T::zero(); 8];
        let mut zs: Vec<T>;
        let zbuf: &mut [T] = if self.active.len() <= 8 {
            &mut z[..self.active.len()]
        } else {
            zs = vec![T::zero(); self.active.len()];
            &mut zs
        };
        for (k, &c) in self.active.iter().enumerate() {
            zbuf[k] = (x[c] - self.center[k]) / self.scale[k];
        }
        if phi.len() == zbuf.len() + 1 {
            phi[0] = T::one();
            phi[1..].copy_from_slice(zbuf);
            return;
        }
        for (f, ex) in phi.iter_mut().zip(&self.exponents) {
            let mut v = T::one();
            for (k, &e) in ex.iter().enumerate() {
                for _ in 0..e {
                    v = v * zbuf[k];
                }
            }
            *f = v;
        }
    }

    /// Evaluates the fitted map at `x`, writing `q` outputs.
    pub fn predict_into(&self, x: &[T], out: &mut [T]) {
        let p = self.exponents.len();
        let mut phi_small = [T::zero(); 20];
        let mut phi_vec: Vec<T>;
        let phi: &mut [T] = if p <= 20 {
            &mut phi_small[..p]
        } else {
            phi_vec = vec![T::zero(); p];
            &mut phi_vec
        };
        self.features(x, phi);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (a, &f) in phi.iter().enumerate() {
            for (o, &c) in out
                .iter_mut()
                .zip(&self.coef[a * self.outputs..(a + 1) * self.outputs])
            {
                *o = *o + f * c;
            }
        }
    }

    pub fn predict(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.outputs];
        self.predict_into(x, &mut out);
        out
    }

    /// Jacobian of the fitted map at `x`, `q x d` row-major. Dropped
    /// coordinates contribute zero columns.
    pub fn jacobian(&self, x: &[T]) -> Vec<T> {
        let q = self.outputs;
        let mut jac = vec![T::zero(); q * self.dim];
        let z: Vec<T> = self
            .active
            .iter()
            .enumerate()
            .map(|(k, &c)| (x[c] - self.center[k]) / self.scale[k])
            .collect();
        for (a, ex) in self.exponents.iter().enumerate() {
            for (k, &c) in self.active.iter().enumerate() {
                if ex[k] == 0 {
                    continue;
                }
                // d/dz_k of prod z^e, chained through 1/scale
                let mut v = T::from_usize_lossy(ex[k] as usize);
                for (kk, &e) in ex.iter().enumerate() {
                    let pow = if kk == k { e - 1 } else { e };
                    for _ in 0..pow {
                        v = v * z[kk];
                    }
                }
                v = v / self.scale[k];
                for o in 0..q {
                    jac[o * self.dim + c] = jac[o * self.dim + c] + v * self.coef[a * q + o];
                }
            }
        }
        jac
    }
}

/// Goodness of fit and coefficient uncertainty of a [`LinearFit`] on its
/// training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FitStatistics<T> {
    /// Per output; `1` when the target has no spread and is reproduced.
    pub r_squared: Vec<T>,
    /// Unbiased residual variance per output.
    pub residual_variance: Vec<T>,
    /// Ordinary least-squares standard errors, `features x outputs`.
    pub coef_se: Vec<T>,
}

impl<T: Real> LinearFit<T> {
    pub fn degree(&self) -> usize {
        self.exponents
            .iter()
            .map(|e| e.iter().map(|&v| v as usize).sum::<usize>())
            .max()
            .unwrap_or(0)
    }

    /// State coordinates kept in the fit.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Monomial labels in the standardised coordinates `z_c = (x_c - center_c) / scale_c`.
    pub fn feature_labels(&self) -> Vec<String> {
        self.exponents
            .iter()
            .map(|ex| {
                let parts: Vec<String> = ex
                    .iter()
                    .zip(&self.active)
                    .filter(|(&e, _)| e > 0)
                    .map(|(&e, &c)| {
                        if e == 1 {
                            format!("z{c}")
                        } else {
                            format!("z{c}^{e}")
                        }
                    })
                    .collect();
                if parts.is_empty() {
                    "1".to_string()
                } else {
                    parts.join("*")
                }
            })
            .collect()
    }

    /// Centering and scaling of the active coordinates.
    pub fn standardisation(&self) -> (&[T], &[T]) {
        (&self.center, &self.scale)
    }

    /// `(intercept, slope)` in original coordinates when the fit has degree
    /// at most one; `slope` is `q x d` row-major.
    pub fn affine(&self) -> Option<(Vec<T>, Vec<T>)> {
        if self.degree() > 1 {
            return None;
        }
        let q = self.outputs;
        let mut intercept = self.coef[..q].to_vec();
        let mut slope = vec![T::zero(); q * self.dim];
        for (a, ex) in self.exponents.iter().enumerate().skip(1) {
            let k = ex.iter().position(|&e| e == 1).expect("linear monomial");
            let c = self.active[k];
            for o in 0..q {
                let s = self.coef[a * q + o] / self.scale[k];
                slope[o * self.dim + c] = s;
                intercept[o] = intercept[o] - s * self.center[k];
            }
        }
        Some((intercept, slope))
    }

    pub fn statistics(&self, xs: &[T], targets: &[T]) -> FitStatistics<T> {
        let q = self.outputs;
        let p = self.exponents.len();
        let m = xs.len() / self.dim;
        let mf = T::from_usize_lossy(m);
        let mut phi = vec![T::zero(); p];
        let mut pred = vec![T::zero(); q];
        let mut gram = vec![T::zero(); p * p];
        let mut mean = vec![T::zero(); q];
        let mut sq = vec![T::zero(); q];
        let mut ss_res = vec![T::zero(); q];
        for (x, y) in xs.chunks_exact(self.dim).zip(targets.chunks_exact(q)) {
            self.features(x, &mut phi);
            for a in 0..p {
                for b in 0..p {
                    gram[a * p + b] = gram[a * p + b] + phi[a] * phi[b];
                }
            }
            self.predict_into(x, &mut pred);
            for o in 0..q {
                let e = y[o] - pred[o];
                ss_res[o] = ss_res[o] + e * e;
                mean[o] = mean[o] + y[o];
                sq[o] = sq[o] + y[o] * y[o];
            }
        }
        let mut r_squared = vec![T::one(); q];
        let mut residual_variance = vec![T::zero(); q];
        let dof = T::from_usize_lossy(m.saturating_sub(p).max(1));
        for o in 0..q {
            let mu = mean[o] / mf;
            let ss_tot = (sq[o] - mf * mu * mu).max(T::zero());
            let floor = T::lit(64.0) * T::epsilon() * sq[o];
            if ss_tot > floor {
                r_squared[o] = T::one() - ss_res[o] / ss_tot;
            } else if ss_res[o] > floor {
                r_squared[o] = T::zero();
            }
            residual_variance[o] = ss_res[o] / dof;
        }
        let mut coef_se = vec![T::nan(); p * q];
        if cholesky_in_place(&mut gram, p, T::lit(1e3) * T::epsilon()) {
            for a in 0..p {
                let mut unit = vec![T::zero(); p];
                unit[a] = T::one();
                cholesky_solve(&gram, p, &mut unit, 1);
                let inv_aa = unit[a].max(T::zero());
                for o in 0..q {
                    coef_se[a * q + o] = (inv_aa * residual_variance[o]).sqrt();
                }
            }
        }
        FitStatistics {
            r_squared,
            residual_variance,
            coef_se,
        }
    }
}
