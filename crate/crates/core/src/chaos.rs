//! N-player systems built from the mean-field solution: open-loop copies and
//! distributed feedback, the equilibrium-gap sweep over N, and a Wasserstein
//! rate control experiment.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::decoupling::{fit_field, replay_feedback_perturbed, DecouplingField, Perturbation};
use crate::error::{Error, Result};
use crate::fbsde::{solve_mkv_fbsde, ContinuationConfig, FbsdeSolution};
use crate::maxprinciple::{
    generate_noise, particle_costs, simulate_state_with, ControlPaths, StatePaths, TimeGrid,
};
use crate::measure::chaos_rate;
use crate::model::ModelSpec;
use crate::noise::{stream_rng, NoiseBank};
use crate::paths::PathArray;
use crate::scalar::{dot, mean_and_se, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayMode {
    /// Player `i` replays the open-loop control of the limit copy driven by `W^i`.
    OpenLoop,
    /// Player `i` plays `alpha_hat(t, X^i, mu_t, v(t, X^i))`.
    Feedback,
}

/// One simulation of the N-player system.
#[derive(Debug, Clone)]
pub struct NPlayerRun<T> {
    pub n: usize,
    pub mode: PlayMode,
    pub states: StatePaths<T>,
    pub controls: ControlPaths<T>,
    /// `J^{N,i}` for every player.
    pub player_costs: Vec<T>,
    /// Common cost `J^N`: the player average, with its standard error.
    pub cost: T,
    pub cost_se: T,
}

/// Increments of players `first .. first + count` of `noise`.
pub fn noise_block<T: Real>(
    noise: &NoiseBank<T>,
    first: usize,
    count: usize,
) -> Result<NoiseBank<T>> {
    if first + count > noise.particles() {
        return Err(Error::InvalidParameter(format!(
            "noise block {first}..{} exceeds {} streams",
            first + count,
            noise.particles()
        )));
    }
    Ok(NoiseBank {
        seed: noise.seed,
        first_stream: noise.first_stream + first as u64,
        increments: noise.increments.select_particles(first, count),
    })
}

/// Feedback N-player run on fresh streams `0..n` of `seed`.
pub fn simulate_nplayer_feedback<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    n: usize,
    field: &DecouplingField<T>,
    seed: u64,
) -> Result<NPlayerRun<T>> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one player".into()));
    }
    let noise = generate_noise(spec, grid, n, seed);
    simulate_nplayer_feedback_with(spec, grid, field, noise, &|_, _, _| {})
}

/// Feedback N-player run on the given streams, one per player, with an
/// optional common perturbation of the strategy.
pub fn simulate_nplayer_feedback_with<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    field: &DecouplingField<T>,
    noise: Arc<NoiseBank<T>>,
    perturb: Perturbation<'_, T>,
) -> Result<NPlayerRun<T>> {
    let n = noise.particles();
    let initial: Vec<T> = (0..n).flat_map(|_| spec.x0.iter().copied()).collect();
    let run = replay_feedback_perturbed(spec, grid, field, &initial, noise, perturb)?;
    Ok(NPlayerRun {
        n,
        mode: PlayMode::Feedback,
        states: run.states,
        controls: run.control,
        player_costs: run.player_costs,
        cost: run.cost,
        cost_se: run.cost_se,
    })
}

/// Open-loop N-player run: player `i` uses the control path and the noise of
/// reference particle `first + i`, and interacts through the live empirical
/// measure of the N players.
pub fn simulate_nplayer_openloop<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    n: usize,
    reference: &FbsdeSolution<T>,
    first: usize,
) -> Result<NPlayerRun<T>> {
    let m = reference.particles();
    if n == 0 || first + n > m {
        return Err(Error::InvalidParameter(format!(
            "players {first}..{} need a reference with at least that many particles, got {m}",
            first + n
        )));
    }
    let noise = Arc::new(noise_block(&reference.states.noise, first, n)?);
    let controls = ControlPaths {
        values: reference.control.values.select_particles(first, n),
    };
    let initial = reference.states.x.step(0)[first * spec.d..(first + n) * spec.d].to_vec();
    let states = simulate_state_with(spec, grid, &initial, &controls, noise)?;
    let player_costs = particle_costs(spec, grid, &states, &controls);
    let (cost, cost_se) = mean_and_se(&player_costs);
    Ok(NPlayerRun {
        n,
        mode: PlayMode::OpenLoop,
        states,
        controls,
        player_costs,
        cost,
        cost_se,
    })
}

/// One `(N, mode, rep)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosRecord {
    pub n: usize,
    pub mode: PlayMode,
    pub rep: usize,
    /// `J^N` of the run.
    pub j_n: f64,
    /// Average limit cost of the matched reference copies.
    pub j_copy: f64,
    /// `J^N - J_copy`.
    pub gap: f64,
    /// `mean_i max_n |X^i_n - Xbar^i_n|^2` against the matched copies.
    pub copy_msd: f64,
}

/// Batch means over the repetitions at one `N` and mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosSummary {
    pub n: usize,
    pub mode: PlayMode,
    pub j_n: f64,
    pub j_n_se: f64,
    /// Paired gap `J^N - J_copy` and its standard error.
    pub gap: f64,
    pub gap_se: f64,
    /// `J^N - J` against the reference cost.
    pub raw_gap: f64,
    pub copy_msd: f64,
    /// `N^{-1/(d+4)}`.
    pub rate_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosReport {
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub reference_particles: usize,
    pub j_reference: f64,
    pub j_reference_se: f64,
    pub records: Vec<ChaosRecord>,
    pub summary: Vec<ChaosSummary>,
    /// Log-log slope of `|gap|` against `N` per mode; `None` with fewer than
    /// two usable points.
    pub feedback_slope: Option<f64>,
    pub open_loop_slope: Option<f64>,
}

impl ChaosReport {
    pub fn summaries(&self, mode: PlayMode) -> Vec<&ChaosSummary> {
        self.summary.iter().filter(|s| s.mode == mode).collect()
    }
}

/// Least-squares slope of `ln y` against `ln x` over the positive pairs.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(&x, &y)| x > 0.0 && y > 0.0)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn copy_msd<T: Real>(run: &PathArray<T>, reference: &PathArray<T>, first: usize) -> f64 {
    let n = run.particles();
    let mut total = 0.0;
    for i in 0..n {
        let mut worst = T::zero();
        for s in 0..run.steps() {
            let a = run.at(s, i);
            let b = reference.at(s, first + i);
            let diff: Vec<T> = a.iter().zip(b).map(|(&p, &q)| p - q).collect();
            worst = worst.max(dot(&diff, &diff));
        }
        total += worst.as_f64();
    }
    total / n as f64
}

/// Solves the limit problem on `max(ns) * reps` particles, then for every
/// `N` and repetition `r` runs both N-player constructions on reference
/// particles `r N .. (r + 1) N`, pairing each run with the limit copies
/// driven by the same Brownian motions.
pub fn equilibrium_gap_sweep<T: Real>(
    spec: &ModelSpec<T>,
    grid: &TimeGrid<T>,
    ns: &[usize],
    reps: usize,
    seed: u64,
    cfg: &ContinuationConfig<T>,
) -> Result<ChaosReport> {
    if ns.is_empty() || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "player counts must be positive and strictly increasing".into(),
        ));
    }
    if reps == 0 {
        return Err(Error::InvalidParameter(
            "need at least one repetition".into(),
        ));
    }
    if !spec.control_free_volatility(&grid.left_times()) {
        return Err(Error::ControlDependentVolatility);
    }
    let particles = (ns[ns.len() - 1] * reps).max(2);
    let reference = solve_mkv_fbsde(spec, grid, particles, cfg, seed)?;
    let field = fit_field(&reference, grid, cfg.degree)?;
    let summary_ref = reference
        .summary
        .as_ref()
        .expect("full solve carries a summary");
    let j_reference = summary_ref.j.as_f64();
    let copy_costs = particle_costs(spec, grid, &reference.states, &reference.control);

    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &n in ns {
        for mode in [PlayMode::Feedback, PlayMode::OpenLoop] {
            let mut cells = Vec::with_capacity(reps);
            for rep in 0..reps {
                let first = rep * n;
                let run = match mode {
                    PlayMode::Feedback => {
                        let noise = Arc::new(noise_block(&reference.states.noise, first, n)?);
                        simulate_nplayer_feedback_with(spec, grid, &field, noise, &|_, _, _| {})?
                    }
                    PlayMode::OpenLoop => {
                        simulate_nplayer_openloop(spec, grid, n, &reference, first)?
                    }
                };
                let j_copy = copy_costs[first..first + n]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>()
                    / n as f64;
                let j_n = run.cost.as_f64();
                let rec = ChaosRecord {
                    n,
                    mode,
                    rep,
                    j_n,
                    j_copy,
                    gap: j_n - j_copy,
                    copy_msd: copy_msd(&run.states.x, &reference.states.x, first),
                };
                cells.push(rec.clone());
                records.push(rec);
            }
            let (j_n, j_n_se) = mean_and_se(&cells.iter().map(|c| c.j_n).collect::<Vec<_>>());
            let (gap, gap_se) = mean_and_se(&cells.iter().map(|c| c.gap).collect::<Vec<_>>());
            let msd = cells.iter().map(|c| c.copy_msd).sum::<f64>() / reps as f64;
            summary.push(ChaosSummary {
                n,
                mode,
                j_n,
                j_n_se: if reps > 1 { j_n_se } else { f64::NAN },
                gap,
                gap_se: if reps > 1 { gap_se } else { f64::NAN },
                raw_gap: j_n - j_reference,
                copy_msd: msd,
                rate_bound: chaos_rate::<f64>(n, spec.d),
            });
        }
    }
    let slope = |mode: PlayMode| {
        let rows: Vec<&ChaosSummary> = summary.iter().filter(|s| s.mode == mode).collect();
        let xs: Vec<f64> = rows.iter().map(|s| s.n as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|s| s.gap.abs()).collect();
        log_log_slope(&xs, &ys)
    };
    Ok(ChaosReport {
        ns: ns.to_vec(),
        reps,
        seed,
        reference_particles: particles,
        j_reference,
        j_reference_se: summary_ref.j_se.as_f64(),
        feedback_slope: slope(PlayMode::Feedback),
        open_loop_slope: slope(PlayMode::OpenLoop),
        records,
        summary,
    })
}

/// Exact `W_2^2` between the empirical measure of `sample` and `N(0, 1)`,
/// integrating the quantile coupling cell by cell.
pub fn w2_squared_to_standard_normal(sample: &[f64]) -> f64 {
    let n = sample.len();
    assert!(n > 0, "empty sample");
    let normal = Normal::standard();
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    // z phi(z) and phi(z) at the quantile u, with the limits at 0 and 1
    let at = |u: f64| -> (f64, f64) {
        if u <= 0.0 || u >= 1.0 {
            (0.0, 0.0)
        } else {
            let z = normal.inverse_cdf(u);
            let p = normal.pdf(z);
            (p, z * p)
        }
    };
    let nf = n as f64;
    let mut total = 0.0;
    let mut lower = at(0.0);
    for (i, &x) in xs.iter().enumerate() {
        let upper = at((i + 1) as f64 / nf);
        // int_a^b q(u) du = phi(q(a)) - phi(q(b)); int_a^b q^2 du = (b - a) - [q phi(q)]_a^b
        let first = lower.0 - upper.0;
        let second = 1.0 / nf - (upper.1 - lower.1);
        total += x * x / nf - 2.0 * x * first + second;
        lower = upper;
    }
    total.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct W2RateReport {
    pub ns: Vec<usize>,
    pub mean_w2_squared: Vec<f64>,
    pub se: Vec<f64>,
    pub slope: Option<f64>,
}

/// `E[W_2^2(empirical_N, N(0,1))]` for i.i.d. standard normal samples,
/// averaged over `reps` seeds, with its log-log slope in `N`.
pub fn w2_rate_experiment(ns: &[usize], reps: usize, seed: u64) -> W2RateReport {
    let mut mean_w2_squared = Vec::with_capacity(ns.len());
    let mut se = Vec::with_capacity(ns.len());
    for &n in ns {
        let vals: Vec<f64> = (0..reps)
            .map(|r| {
                let mut rng = stream_rng(seed, ((n as u64) << 32) | r as u64);
                let sample: Vec<f64> = (0..n)
                    .map(|_| rng.sample(rand_distr::StandardNormal))
                    .collect();
                w2_squared_to_standard_normal(&sample)
            })
            .collect();
        let (m, s) = mean_and_se(&vals);
        mean_w2_squared.push(m);
        se.push(s);
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    W2RateReport {
        slope: log_log_slope(&xs, &mean_w2_squared),
        ns: ns.to_vec(),
        mean_w2_squared,
        se,
    }
}
