//! The decoupling field `v(t, .)` with `Y_t = v(t, X_t)`, fitted step by step
//! on a solved particle system, and its feedback replay.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbsde::FbsdeSolution;
use crate::hamiltonian::{minimize_alpha_into, NewtonConfig};
use crate::maxprinciple::{euler_update, particle_costs, ControlPaths, StatePaths, TimeGrid};
use crate::measure::ParticleCloud;
use crate::model::ModelSpec;
use crate::noise::{stream_rng, NoiseBank};
use crate::paths::PathArray;
use crate::regression::{LinearFit, MAX_DEGREE};
use crate::scalar::{dot, mean_and_se, Real, PAR_CHUNK};

/// Fit of `Y_n` against `X_n` at one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStep<T> {
    pub step: usize,
    pub time: T,
    /// `None` when the cloud has no spread in some coordinate.
    pub fit: Option<LinearFit<T>>,
    /// Smallest coefficient of determination over the outputs.
    pub r_squared: Option<T>,
    /// Particle average of `Y_n`; the field's value on a collapsed cloud.
    pub atom_value: Vec<T>,
    /// Monte Carlo standard error of the affine slope (`d x d`, row-major),
    /// accumulated over the backward regressions from this step on.
    pub slope_se: Option<Vec<T>>,
    /// Same for the fitted value at the cloud mean.
    pub value_se: Vec<T>,
    /// Coordinate-wise 1st and 99th percentiles of `X_n`.
    pub envelope: (Vec<T>, Vec<T>),
}

impl<T: Real> FieldStep<T> {
    pub fn is_degenerate(&self) -> bool {
        self.fit.is_none()
    }
}

/// Fitted field on every grid step together with the reference flow
/// `P_{X_t}` of the solve it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField<T> {
    pub d: usize,
    pub degree: usize,
    pub steps: Vec<FieldStep<T>>,
    pub reference: Vec<ParticleCloud<T>>,
}

impl<T: Real> DecouplingField<T> {
    /// `v(t_n, x)`; `None` on degenerate steps.
    pub fn evaluate(&self, n: usize, x: &[T]) -> Option<Vec<T>> {
        self.steps[n].fit.as_ref().map(|f| f.predict(x))
    }

    /// `v(t_n, x)`, falling back to the cloud average on degenerate steps,
    /// where the cloud sits on a single point.
    pub fn value_into(&self, n: usize, x: &[T], out: &mut [T]) {
        match &self.steps[n].fit {
            Some(f) => f.predict_into(x, out),
            None => out.copy_from_slice(&self.steps[n].atom_value),
        }
    }

    pub fn degenerate_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.is_degenerate())
            .map(|s| s.step)
            .collect()
    }

    /// `sup_n |v(t_n, 0)|` over the fitted steps.
    pub fn sup_at_origin(&self) -> T {
        let zero = vec![T::zero(); self.d];
        self.steps
            .iter()
            .filter_map(|s| s.fit.as_ref().map(|f| f.predict(&zero)))
            .fold(T::zero(), |m, v| m.max(dot(&v, &v).sqrt()))
    }

    /// `(intercept, slope)` of step `n` when the fit is affine.
    pub fn affine(&self, n: usize) -> Option<(Vec<T>, Vec<T>)> {
        self.steps[n].fit.as_ref().and_then(|f| f.affine())
    }

    /// Flat export rows `(step, time, output, term, coefficient, r_squared)`.
    /// Affine fits are written in original coordinates with terms `1` and
    /// `x<c>`; higher degrees use standardised monomials plus their
    /// `center<c>` and `scale<c>` rows.
    pub fn coefficient_rows(&self) -> Vec<CoefficientRow> {
        let mut rows = Vec::new();
        for s in &self.steps {
            let Some(fit) = &s.fit else { continue };
            let r2 = s.r_squared.map(|v| v.as_f64()).unwrap_or(f64::NAN);
            let mut push = |output: usize, term: String, value: T| {
                rows.push(CoefficientRow {
                    step: s.step,
                    time: s.time.as_f64(),
                    output,
                    term,
                    coefficient: value.as_f64(),
                    r_squared: r2,
                })
            };
            if let Some((intercept, slope)) = fit.affine() {
                for o in 0..self.d {
                    push(o, "1".into(), intercept[o]);
                    for c in 0..self.d {
                        push(o, format!("x{c}"), slope[o * self.d + c]);
                    }
                }
            } else {
                let labels = fit.feature_labels();
                let q = fit.outputs();
                for o in 0..q {
                    for (a, label) in labels.iter().enumerate() {
                        push(o, label.clone(), fit.coefficients()[a * q + o]);
                    }
                }
                let (center, scale) = fit.standardisation();
                for (k, &c) in fit.active().iter().enumerate() {
                    push(0, format!("center{c}"), center[k]);
                    push(0, format!("scale{c}"), scale[k]);
                }
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub step: usize,
    pub time: f64,
    pub output: usize,
    pub term: String,
    pub coefficient: f64,
    pub r_squared: f64,
}

fn percentile_envelope<T: Real>(xs: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let m = xs.len() / d;
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for c in 0..d {
        let mut col: Vec<T> = (0..m).map(|i| xs[i * d + c]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).expect("finite states"));
        let at = |p: f64| col[((p * (m - 1) as f64).round() as usize).min(m - 1)];
        lo.push(at(0.01));
        hi.push(at(0.99));
    }
    (lo, hi)
}

/// Least-squares fit of `Y_n` on polynomial features of `X_n` at every step.
///
/// Steps whose cloud has collapsed in some coordinate (for instance `t = 0`
/// from a point mass, or any step of a noiseless system) are reported as
/// degenerate and carry no fit.
pub fn fit_field<T: Real>(
    sol: &FbsdeSolution<T>,
    grid: &TimeGrid<T>,
    degree: usize,
) -> Result<DecouplingField<T>> {
    if degree > MAX_DEGREE {
        return Err(Error::InvalidParameter(format!(
            "basis degree {degree} exceeds {MAX_DEGREE}"
        )));
    }
    let x = &sol.states.x;
    let y = &sol.adjoint.y;
    let d = x.width();
    let nt = grid.steps();
    if x.steps() != nt + 1 || y.width() != d {
        return Err(Error::Dimension("solution does not match the grid".into()));
    }
    let mm = x.particles();
    let mf = T::from_usize_lossy(mm);

    let fit_at = |xs: &[T], ys: &[T], n: usize| -> Option<LinearFit<T>> {
        LinearFit::fit(degree, xs, d, ys, d, n)
            .ok()
            .filter(|f| !f.is_reduced())
    };

    let mut steps: Vec<FieldStep<T>> = (0..=nt)
        .map(|n| {
            let (xs, ys) = (x.step(n), y.step(n));
            let fit = fit_at(xs, ys, n);
            let r_squared = fit.as_ref().map(|f| {
                f.statistics(xs, ys)
                    .r_squared
                    .into_iter()
                    .fold(T::one(), |a, b| a.min(b))
            });
            let mut atom_value = vec![T::zero(); d];
            for yi in ys.chunks_exact(d) {
                for (a, &v) in atom_value.iter_mut().zip(yi) {
                    *a = *a + v;
                }
            }
            atom_value.iter_mut().for_each(|a| *a = *a / mf);
            FieldStep {
                step: n,
                time: grid.time(n),
                fit,
                r_squared,
                atom_value,
                slope_se: None,
                value_se: vec![T::zero(); d],
                envelope: percentile_envelope(xs, d),
            }
        })
        .collect();

    // Monte Carlo error of the backward regressions `E[Y_{n+1} | X_n]`,
    // accumulated from the terminal step backwards.
    let mut slope_var = vec![T::zero(); d * d];
    let mut value_var = vec![T::zero(); d];
    let mut slope_known = degree == 1;
    for n in (0..nt).rev() {
        let (xs, ys) = (x.step(n), y.step(n + 1));
        match fit_at(xs, ys, n) {
            Some(f) => {
                let st = f.statistics(xs, ys);
                for o in 0..d {
                    value_var[o] = value_var[o] + st.coef_se[o] * st.coef_se[o];
                }
                if degree == 1 {
                    let (_, scale) = f.standardisation();
                    for (k, &c) in f.active().iter().enumerate() {
                        for o in 0..d {
                            let se = st.coef_se[(1 + k) * d + o] / scale[k];
                            slope_var[o * d + c] = slope_var[o * d + c] + se * se;
                        }
                    }
                }
            }
            None => {
                slope_known = false;
                let mut var = vec![T::zero(); d];
                let mean = &steps[n + 1].atom_value;
                for yi in ys.chunks_exact(d) {
                    for o in 0..d {
                        let e = yi[o] - mean[o];
                        var[o] = var[o] + e * e;
                    }
                }
                for o in 0..d {
                    value_var[o] = value_var[o] + var[o] / (mf * (mf - T::one()).max(T::one()));
                }
            }
        }
        let s = &mut steps[n];
        s.value_se = value_var.iter().map(|v| v.sqrt()).collect();
        if slope_known && s.fit.is_some() {
            s.slope_se = Some(slope_var.iter().map(|v| v.sqrt()).collect());
        }
    }
    if let Some(s) = steps.last_mut() {
        if degree == 1 && s.fit.is_some() {
            s.slope_se = Some(vec![T::zero(); d * d]);
        }
    }

    Ok(DecouplingField {
        d,
        degree,
        steps,
        reference: (0..=nt).map(|n| x.cloud(n)).collect(),
    })
}

/// Where Lipschitz probes are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeBox<T> {
    /// The per-step 1st to 99th percentile envelope of the cloud.
    Envelope,
    /// A fixed box `[lo, hi]`.
    Fixed(Vec<T>, Vec<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzProfile<T> {
    /// Largest difference quotient per step; `None` on degenerate steps.
    pub per_step: Vec<Option<T>>,
    pub max: T,
}

/// Largest difference quotient `|v(x) - v(x')| / |x - x'|` over `probes`
/// random pairs per step.
pub fn lipschitz_profile<T: Real>(
    field: &DecouplingField<T>,
    probe_box: &ProbeBox<T>,
    probes: usize,
    seed: u64,
) -> LipschitzProfile<T> {
    let d = field.d;
    let mut per_step = Vec::with_capacity(field.steps.len());
    let mut max = T::zero();
    for s in &field.steps {
        let Some(fit) = &s.fit else {
            per_step.push(None);
            continue;
        };
        let (lo, hi) = match probe_box {
            ProbeBox::Envelope => (&s.envelope.0, &s.envelope.1),
            ProbeBox::Fixed(lo, hi) => (lo, hi),
        };
        let mut rng = stream_rng(seed, s.step as u64);
        let mut a = vec![T::zero(); d];
        let mut b = vec![T::zero(); d];
        let mut best = T::zero();
        for _ in 0..probes {
            for c in 0..d {
                let (l, h) = (lo[c], hi[c]);
                a[c] = l + (h - l) * T::lit(rng.random::<f64>());
                b[c] = l + (h - l) * T::lit(rng.random::<f64>());
            }
            let dx: Vec<T> = a.iter().zip(&b).map(|(&p, &q)| p - q).collect();
            let gap = dot(&dx, &dx).sqrt();
            if gap == T::zero() {
                continue;
            }
            let va = fit.predict(&a);
            let vb = fit.predict(&b);
            let dv: Vec<T> = va.iter().zip(&vb).map(|(&p, &q)| p - q).collect();
            best = best.max(dot(&dv, &dv).sqrt() / gap);
        }
        max = max.max(best);
        per_step.push(Some(best));
    }
    LipschitzProfile { per_step, max }
}

/// Forward run under the feedback `alpha_hat(t, x, mu_t, v(t, x), 0)`.
#[derive(Debug, Clone)]
pub struct FeedbackRun<T> {
    pub states: StatePaths<T>,
    pub control: ControlPaths<T>,
    pub player_costs: Vec<T>,
    pub cost: T,
    pub cost_se: T,
}

/// Simulates the particle system in which every particle plays the feedback
/// built from `field`. The law argument of the optimiser is the stored
/// reference flow; the dynamics and costs see the live empirical measure.
pub fn replay_feedback<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    field: &DecouplingField<T>,
    initial: &[T],
    noise: Arc<NoiseBank<T>>,
) -> Result<FeedbackRun<T>> {
    replay_feedback_perturbed(spec, grid, field, initial, noise, &|_, _, _| {})
}

/// Additive control perturbation `(step, x, alpha)`, shared by all particles.
pub type Perturbation<'a, T> = &'a (dyn Fn(usize, &[T], &mut [T]) + Sync);

/// [`replay_feedback`] with `perturb` applied to the feedback control.
pub fn replay_feedback_perturbed<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    field: &DecouplingField<T>,
    initial: &[T],
    noise: Arc<NoiseBank<T>>,
    perturb: Perturbation<'_, T>,
) -> Result<FeedbackRun<T>> {
    let (d, m, k) = (spec.d, spec.m, spec.k);
    let nt = grid.steps();
    let times = grid.left_times();
    if !spec.control_free_volatility(&times) {
        return Err(Error::ControlDependentVolatility);
    }
    if field.d != d || field.steps.len() != nt + 1 {
        return Err(Error::Dimension(
            "field does not match model and grid".into(),
        ));
    }
    let mm = noise.particles();
    if initial.len() != mm * d || noise.steps() != nt || noise.increments.width() != m {
        return Err(Error::Dimension(
            "initial points or noise do not match".into(),
        ));
    }
    let coeffs = spec.dynamics.sample(&times)?;
    let newton = NewtonConfig::default();
    let dt = grid.dt();
    let zero_z = vec![T::zero(); d * m];
    let mut x = PathArray::zeros(nt + 1, mm, d);
    x.step_mut(0).copy_from_slice(initial);
    let mut control = ControlPaths::zeros(nt, mm, k);
    let stride = mm * d;
    for n in 0..nt {
        let mean = x.step_mean(n);
        let c = &coeffs[n];
        let reference = &field.reference[n];
        let t = grid.time(n);
        let (head, tail) = x.as_mut_slice().split_at_mut((n + 1) * stride);
        let prev = &head[n * stride..];
        let next = &mut tail[..stride];
        let inc = &noise.increments;
        next.par_chunks_mut(d)
            .zip(control.values.step_mut(n).par_chunks_mut(k))
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .try_for_each_init(
                || {
                    (
                        vec![T::zero(); d],
                        vec![T::zero(); d],
                        vec![T::zero(); d * m],
                    )
                },
                |(v, b, s), (i, (out, a))| {
                    let xi = &prev[i * d..(i + 1) * d];
                    field.value_into(n, xi, v);
                    minimize_alpha_into(
                        c, &spec.cost, t, xi, reference, v, &zero_z, &newton, None, a,
                    )?;
                    perturb(n, xi, a);
                    c.drift_into(xi, &mean, a, b);
                    c.vol_into(xi, &mean, a, s);
                    euler_update(xi, b, s, inc.at(n, i), dt, out);
                    Ok(())
                },
            )?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: n + 1 });
        }
    }
    let states = StatePaths { x, noise };
    let player_costs = particle_costs(spec, grid, &states, &control);
    let (cost, cost_se) = mean_and_se(&player_costs);
    Ok(FeedbackRun {
        states,
        control,
        player_costs,
        cost,
        cost_se,
    })
}
