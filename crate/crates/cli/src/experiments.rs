//! The five experiments. Each returns its tables, a JSON result object and a
//! short human-readable summary; nothing touches the filesystem here.

use std::fmt::Write as _;

use mfc_core::chaos::{equilibrium_gap_sweep, w2_rate_experiment};
use mfc_core::decoupling::{fit_field, lipschitz_profile, ProbeBox};
use mfc_core::fbsde::{residual, solve_mkv_fbsde, FbsdeSolution};
use mfc_core::maxprinciple::{
    cost, gateaux, generate_noise, simulate_state_with, solve_adjoint, ControlPaths, TimeGrid,
};
use mfc_core::model::ModelSpec;
use mfc_core::riccati::LqOracle;
use serde_json::{json, Value};

use crate::config::{ModelConfig, RunConfig};
use crate::output::Table;
use crate::{row, Experiment, Failure};

#[derive(Debug)]
pub struct Outcome {
    pub tables: Vec<(String, Table)>,
    pub results: Value,
    pub text: String,
}

pub fn run(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let spec = cfg.model.build()?;
    let grid = TimeGrid::new(cfg.model.horizon(), cfg.grid.steps)?;
    let mut out = match cfg.experiment {
        Experiment::Solve => solve(cfg, &spec, &grid),
        Experiment::Gradcheck => gradcheck(cfg, &spec, &grid),
        Experiment::Oracle => oracle(cfg, &spec, &grid),
        Experiment::Decouple => decouple(cfg, &spec, &grid),
        Experiment::Chaos => chaos(cfg, &spec, &grid),
    }?;
    out.text.insert_str(
        0,
        &format!(
            "mfc {} model={} seed={} steps={} particles={}\n",
            cfg.experiment.name(),
            cfg.model.name(),
            cfg.seed,
            cfg.grid.steps,
            cfg.solver.particles
        ),
    );
    Ok(out)
}

fn full_solve(
    cfg: &RunConfig,
    spec: &ModelSpec<f64>,
    grid: &TimeGrid<f64>,
) -> Result<FbsdeSolution<f64>, Failure> {
    Ok(solve_mkv_fbsde(
        spec,
        grid,
        cfg.solver.particles,
        &cfg.solver.continuation(),
        cfg.seed,
    )?)
}

fn step_mean_var(values: &[f64], width: usize, c: usize) -> (f64, f64) {
    let m = values.len() / width;
    let mean = (0..m).map(|i| values[i * width + c]).sum::<f64>() / m as f64;
    let var = (0..m)
        .map(|i| (values[i * width + c] - mean).powi(2))
        .sum::<f64>()
        / m as f64;
    (mean, var)
}

fn solve(cfg: &RunConfig, spec: &ModelSpec<f64>, grid: &TimeGrid<f64>) -> Result<Outcome, Failure> {
    let sol = full_solve(cfg, spec, grid)?;
    let res = residual(spec, grid, &sol, cfg.solver.degree)?;
    let summary = sol
        .summary
        .as_ref()
        .expect("full solves carry a cost summary");

    let mut levels = Table::new(&[
        "level",
        "gamma",
        "step",
        "omega",
        "iterations",
        "final_change",
    ]);
    for (i, l) in sol.diagnostics.levels.iter().enumerate() {
        levels.push(row![
            i,
            l.gamma,
            l.step,
            l.omega,
            l.iterations,
            l.final_change
        ]);
    }

    let (d, k) = (spec.d, spec.k);
    let mut header = vec!["step".to_string(), "time".to_string()];
    for c in 0..d {
        header.extend([
            format!("mean_x{c}"),
            format!("var_x{c}"),
            format!("mean_y{c}"),
        ]);
    }
    for j in 0..k {
        header.push(format!("mean_alpha{j}"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut moments = Table::new(&header);
    for n in 0..=grid.steps() {
        let mut r = row![n, grid.time(n)];
        for c in 0..d {
            let (mx, vx) = step_mean_var(sol.states.x.step(n), d, c);
            let (my, _) = step_mean_var(sol.adjoint.y.step(n), d, c);
            r.extend(row![mx, vx, my]);
        }
        for j in 0..k {
            // The control lives on left endpoints; the last row repeats the final step.
            let a = sol.control.values.step(n.min(grid.steps() - 1));
            r.push(crate::output::Cell::cell(&step_mean_var(a, k, j).0));
        }
        moments.push(r);
    }

    let mut text = String::new();
    let _ = writeln!(text, "J = {:?} (se {:?})", summary.j, summary.j_se);
    let _ = writeln!(text, "Y0 = {:?} (se {:?})", summary.y0, summary.y0_se);
    let _ = writeln!(
        text,
        "levels = {}  base solves = {}  step halvings = {}",
        sol.diagnostics.levels.len(),
        sol.diagnostics.base_solves,
        sol.diagnostics.step_halvings
    );
    let _ = writeln!(
        text,
        "residual: forward {:?} backward {:?} terminal {:?} stationarity {:?}",
        res.forward, res.backward, res.terminal, res.stationarity
    );
    Ok(Outcome {
        tables: vec![
            ("levels.csv".into(), levels),
            ("moments.csv".into(), moments),
        ],
        results: json!({
            "cost": summary,
            "residual": res,
            "residual_max": res.max(),
            "diagnostics": sol.diagnostics,
        }),
        text,
    })
}

fn gradcheck(
    cfg: &RunConfig,
    spec: &ModelSpec<f64>,
    grid: &TimeGrid<f64>,
) -> Result<Outcome, Failure> {
    let m = cfg.solver.particles;
    let eps = cfg.gradcheck.epsilon;
    let base = ControlPaths::zeros(grid.steps(), m, spec.k);
    let noise = generate_noise(spec, grid, m, cfg.seed);
    let initial: Vec<f64> = (0..m).flat_map(|_| spec.x0.clone()).collect();
    let states = simulate_state_with(spec, grid, &initial, &base, noise.clone())?;
    let adjoint = solve_adjoint(spec, grid, &states, &base)?;
    let cost_at = |control: &ControlPaths<f64>| -> Result<f64, Failure> {
        let s = simulate_state_with(spec, grid, &initial, control, noise.clone())?;
        Ok(cost(spec, grid, &s, control))
    };

    let mut table = Table::new(&[
        "direction",
        "gateaux",
        "central_difference",
        "abs_error",
        "rel_error",
    ]);
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for r in 0..cfg.gradcheck.directions {
        let beta =
            ControlPaths::random_smooth(grid, m, spec.k, cfg.seed.wrapping_add(1 + r as u64));
        let g = gateaux(spec, grid, &states, &adjoint, &base, &beta)?;
        let fd = (cost_at(&base.perturbed(&beta, eps))? - cost_at(&base.perturbed(&beta, -eps))?)
            / (2.0 * eps);
        let abs = (g - fd).abs();
        let rel = abs / fd.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        table.push(row![r, g, fd, abs, rel]);
        rows.push(
            json!({ "direction": r, "gateaux": g, "central_difference": fd, "rel_error": rel }),
        );
    }
    let text = format!(
        "base control alpha = 0, epsilon = {eps:?}\nworst relative error over {} directions = {worst:?}\n",
        cfg.gradcheck.directions
    );
    Ok(Outcome {
        tables: vec![("gradcheck.csv".into(), table)],
        results: json!({ "epsilon": eps, "directions": rows, "worst_rel_error": worst }),
        text,
    })
}

fn oracle(
    cfg: &RunConfig,
    spec: &ModelSpec<f64>,
    grid: &TimeGrid<f64>,
) -> Result<Outcome, Failure> {
    let ModelConfig::LqScalar(p) = &cfg.model else {
        return Err(Failure::Config(
            "the oracle experiment needs lq_scalar".into(),
        ));
    };
    let exact = LqOracle::new(&p.params());
    let sol = full_solve(cfg, spec, grid)?;
    let s = sol
        .summary
        .as_ref()
        .expect("full solves carry a cost summary");
    let j_rel = (s.j - exact.cost()).abs() / exact.cost().abs();
    let y0_gap_se = (s.y0[0] - exact.y0()).abs() / s.y0_se[0];

    let mut table = Table::new(&[
        "step",
        "time",
        "mean_x",
        "mean_x_oracle",
        "var_x",
        "var_x_oracle",
        "mean_y",
        "mean_y_oracle",
    ]);
    for n in 0..=grid.steps() {
        let t = grid.time(n);
        let (mx, vx) = step_mean_var(sol.states.x.step(n), 1, 0);
        let (my, _) = step_mean_var(sol.adjoint.y.step(n), 1, 0);
        let mo = exact.mean(t);
        table.push(row![
            n,
            t,
            mx,
            mo,
            vx,
            exact.variance(t),
            my,
            exact.field(t, mo)
        ]);
    }
    let text = format!(
        "J = {:?} (se {:?})  oracle J = {:?}  relative error = {j_rel:?}\nY0 = {:?} (se {:?})  oracle Y0 = {:?}  gap = {y0_gap_se:?} se\n",
        s.j,
        s.j_se,
        exact.cost(),
        s.y0[0],
        s.y0_se[0],
        exact.y0()
    );
    Ok(Outcome {
        tables: vec![("oracle.csv".into(), table)],
        results: json!({
            "j": s.j,
            "j_se": s.j_se,
            "j_oracle": exact.cost(),
            "j_rel_error": j_rel,
            "y0": s.y0[0],
            "y0_se": s.y0_se[0],
            "y0_oracle": exact.y0(),
            "y0_gap_se": y0_gap_se,
        }),
        text,
    })
}

fn decouple(
    cfg: &RunConfig,
    spec: &ModelSpec<f64>,
    grid: &TimeGrid<f64>,
) -> Result<Outcome, Failure> {
    let sol = full_solve(cfg, spec, grid)?;
    let field = fit_field(&sol, grid, cfg.decouple.degree)?;
    let probe_box = match (&cfg.decouple.probe_lo, &cfg.decouple.probe_hi) {
        (Some(lo), Some(hi)) => ProbeBox::Fixed(lo.clone(), hi.clone()),
        _ => ProbeBox::Envelope,
    };
    if let ProbeBox::Fixed(lo, hi) = &probe_box {
        if lo.len() != spec.d || hi.len() != spec.d || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
            return Err(Failure::Config(format!(
                "decouple probe box must have {} coordinates with lo < hi",
                spec.d
            )));
        }
    }
    let profile = lipschitz_profile(
        &field,
        &probe_box,
        cfg.decouple.probes,
        cfg.seed.wrapping_add(1),
    );

    let mut coefficients =
        Table::new(&["step", "time", "output", "term", "coefficient", "r_squared"]);
    for c in field.coefficient_rows() {
        coefficients.push(row![
            c.step,
            c.time,
            c.output,
            c.term,
            c.coefficient,
            c.r_squared
        ]);
    }
    let mut lipschitz = Table::new(&[
        "step",
        "time",
        "degenerate",
        "r_squared",
        "lipschitz",
        "value_se",
    ]);
    let missing = String::new();
    for (s, l) in field.steps.iter().zip(&profile.per_step) {
        let opt = |v: Option<f64>| {
            v.map(|v| crate::output::Cell::cell(&v))
                .unwrap_or_else(|| missing.clone())
        };
        let se = s.value_se.iter().cloned().fold(0.0f64, f64::max);
        lipschitz.push(vec![
            crate::output::Cell::cell(&s.step),
            crate::output::Cell::cell(&s.time),
            (if s.is_degenerate() { "1" } else { "0" }).to_string(),
            opt(s.r_squared),
            opt(*l),
            crate::output::Cell::cell(&se),
        ]);
    }
    let degenerate = field.degenerate_steps();
    let min_r2 = field
        .steps
        .iter()
        .filter_map(|s| s.r_squared)
        .fold(f64::INFINITY, f64::min);
    let text = format!(
        "degree = {}  degenerate steps = {:?}\nsup_t |v(t, 0)| = {:?}\nmax Lipschitz quotient = {:?}\nmin r_squared = {min_r2:?}\n",
        field.degree,
        degenerate,
        field.sup_at_origin(),
        profile.max
    );
    Ok(Outcome {
        tables: vec![
            ("field.csv".into(), coefficients),
            ("lipschitz.csv".into(), lipschitz),
        ],
        results: json!({
            "degree": field.degree,
            "degenerate_steps": degenerate,
            "sup_at_origin": field.sup_at_origin(),
            "lipschitz_max": profile.max,
            "min_r_squared": if min_r2.is_finite() { json!(min_r2) } else { Value::Null },
        }),
        text,
    })
}

fn chaos(cfg: &RunConfig, spec: &ModelSpec<f64>, grid: &TimeGrid<f64>) -> Result<Outcome, Failure> {
    let c = &cfg.chaos;
    let report = equilibrium_gap_sweep(
        spec,
        grid,
        &c.ns,
        c.reps,
        cfg.seed,
        &cfg.solver.continuation(),
    )?;
    let w2 = w2_rate_experiment(&c.w2_ns, c.w2_reps, cfg.seed.wrapping_add(1));

    let mode = |m| {
        serde_json::to_value(m)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    };
    let mut records = Table::new(&["n", "mode", "rep", "j_n", "j_copy", "gap", "copy_msd"]);
    for r in &report.records {
        records.push(row![
            r.n,
            mode(r.mode),
            r.rep,
            r.j_n,
            r.j_copy,
            r.gap,
            r.copy_msd
        ]);
    }
    let mut summary = Table::new(&[
        "n",
        "mode",
        "j_n",
        "j_n_se",
        "gap",
        "gap_se",
        "raw_gap",
        "copy_msd",
        "rate_bound",
    ]);
    for s in &report.summary {
        summary.push(row![
            s.n,
            mode(s.mode),
            s.j_n,
            s.j_n_se,
            s.gap,
            s.gap_se,
            s.raw_gap,
            s.copy_msd,
            s.rate_bound
        ]);
    }
    let mut w2_table = Table::new(&["n", "mean_w2_squared", "se"]);
    for ((n, v), se) in w2.ns.iter().zip(&w2.mean_w2_squared).zip(&w2.se) {
        w2_table.push(row![*n, *v, *se]);
    }

    let mut text = format!(
        "reference J = {:?} (se {:?}) from {} particles\n",
        report.j_reference, report.j_reference_se, report.reference_particles
    );
    for s in &report.summary {
        let _ = writeln!(
            text,
            "N = {:>5} {:<9} gap = {:?} (se {:?})",
            s.n,
            mode(s.mode),
            s.gap,
            s.gap_se
        );
    }
    let _ = writeln!(
        text,
        "gap slopes: feedback {:?} open_loop {:?}\nW2^2 slope = {:?}",
        report.feedback_slope, report.open_loop_slope, w2.slope
    );
    Ok(Outcome {
        tables: vec![
            ("chaos_records.csv".into(), records),
            ("chaos_summary.csv".into(), summary),
            ("w2_rate.csv".into(), w2_table),
        ],
        results: json!({
            "j_reference": report.j_reference,
            "j_reference_se": report.j_reference_se,
            "reference_particles": report.reference_particles,
            "summary": report.summary,
            "feedback_slope": report.feedback_slope,
            "open_loop_slope": report.open_loop_slope,
            "w2": w2,
        }),
        text,
    })
}
