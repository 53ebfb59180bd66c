mod common;

use common::{constant_cost_spec, linear_terminal_spec, scalar_dynamics, zero_cost_spec};
use mfc_core::fbsde::{solve_mkv_fbsde, ContinuationConfig};
use mfc_core::maxprinciple::{
    cost, cost_estimate, duality_check, gateaux, generate_noise, gradient_descent_from,
    gradient_descent_solve, simulate_state, simulate_state_with, solve_adjoint, variation_check,
    AdjointPaths, ControlPaths, StatePaths, TimeGrid, DIVERGENCE_RTOL,
};
use mfc_core::model::{make_lq_scalar, make_zero, LqParams, ModelSpec};
use mfc_core::riccati::LqOracle;
use mfc_core::Error;
use proptest::prelude::*;

fn lq() -> mfc_core::Spec64 {
    make_lq_scalar(&LqParams::benchmark()).unwrap()
}

#[test]
fn time_grid_validates() {
    assert!(TimeGrid::new(1.0, 0).is_err());
    assert!(TimeGrid::new(0.0, 10).is_err());
    let g = TimeGrid::new(2.0, 4).unwrap();
    assert_eq!(g.dt(), 0.5);
    assert_eq!(g.times(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    assert_eq!(g.time(4), 2.0);
}

#[test]
fn zero_dynamics_keep_the_initial_state() {
    let spec = zero_cost_spec(scalar_dynamics(0.0, 0.0, 0.0, 0.0, 0.0), 1.7);
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let control = ControlPaths::random_rough(&grid, 5, 1, 1, 1.0);
    let s = simulate_state(&spec, &grid, &control, 3).unwrap();
    assert!(s.x.as_slice().iter().all(|&v| v == 1.7));
}

#[test]
fn constant_drift_is_integrated_exactly() {
    let spec = zero_cost_spec(scalar_dynamics(1.0, 0.0, 0.0, 0.0, 0.0), 0.25);
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let s = simulate_state(&spec, &grid, &ControlPaths::zeros(8, 3, 1), 3).unwrap();
    assert!(s.x.step(8).iter().all(|&v| v == 1.25));
}

#[test]
fn euler_mean_follows_the_mean_field_ode() {
    let p = LqParams::<f64> {
        b1: 0.3,
        ..LqParams::benchmark()
    };
    let spec = make_lq_scalar(&p).unwrap();
    let grid = TimeGrid::new(1.0, 400).unwrap();
    let mm = 10_000;
    let abar = 0.5;
    let s = simulate_state(&spec, &grid, &ControlPaths::constant(400, mm, &[abar]), 5).unwrap();
    // x' = (b2 + b1) x + b3 abar, fourth-order Runge-Kutta with 10^4 steps.
    let rhs = |x: f64| (p.b2 + p.b1) * x + p.b3 * abar;
    let (mut x, h) = (p.x0, 1e-4);
    let mut ode = vec![x];
    for i in 1..=10_000 {
        let k1 = rhs(x);
        let k2 = rhs(x + 0.5 * h * k1);
        let k3 = rhs(x + 0.5 * h * k2);
        let k4 = rhs(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if i % 25 == 0 {
            ode.push(x);
        }
    }
    for n in [100, 200, 400] {
        let (m, se) = mfc_core::scalar::mean_and_se(s.x.step(n));
        assert!(
            (m - ode[n]).abs() <= 3.0 * se,
            "step {n}: {m} vs {}",
            ode[n]
        );
    }
}

#[test]
fn trivial_costs() {
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let control = ControlPaths::random_smooth(&grid, 7, 1, 2);
    let spec = constant_cost_spec(0.0);
    let s = simulate_state(&spec, &grid, &control, 1).unwrap();
    assert_eq!(cost(&spec, &grid, &s, &control), 0.0);
    let spec = constant_cost_spec(1.0);
    let s = simulate_state(&spec, &grid, &control, 1).unwrap();
    assert!((cost(&spec, &grid, &s, &control) - 1.0).abs() < 1e-14);
}

#[test]
fn deterministic_lq_cost_converges_to_the_quadrature() {
    let p = LqParams::<f64> {
        sigma0: 0.0,
        ..LqParams::benchmark()
    };
    let spec = make_lq_scalar(&p).unwrap();
    // x = x0 e^{b2 t}; the interaction term vanishes because x equals its mean.
    let exact = p.q / 2.0 * p.x0.powi(2) * ((2.0 * p.b2).exp() - 1.0) / (2.0 * p.b2)
        + p.c / 2.0 * (p.x0 * p.b2.exp()).powi(2);
    let mut errs = Vec::new();
    for nt in [50, 100, 200] {
        let grid = TimeGrid::new(1.0, nt).unwrap();
        let control = ControlPaths::zeros(nt, 2, 1);
        let s = simulate_state(&spec, &grid, &control, 0).unwrap();
        let err = (cost(&spec, &grid, &s, &control) - exact).abs();
        assert!(err <= 2.0 / nt as f64, "Nt={nt}: {err}");
        errs.push(err);
    }
    assert!(errs[1] < errs[0] && errs[2] < errs[1]);
}

#[test]
fn adjoint_of_trivial_problems() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let spec = make_zero(1, 0.3, 1.0, vec![0.0]).unwrap();
    let control = ControlPaths::zeros(10, 50, 1);
    let s = simulate_state(&spec, &grid, &control, 1).unwrap();
    let a = solve_adjoint(&spec, &grid, &s, &control).unwrap();
    assert!(a.y.as_slice().iter().all(|&v| v == 0.0));
    assert!(a.z.as_slice().iter().all(|&v| v == 0.0));

    let spec = linear_terminal_spec(0.4);
    let s = simulate_state(&spec, &grid, &control, 1).unwrap();
    let a = solve_adjoint(&spec, &grid, &s, &control).unwrap();
    assert!(a.y.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    assert!(a.z.as_slice().iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn adjoint_at_the_optimum_matches_the_riccati_value() {
    let p = LqParams::<f64>::benchmark();
    let spec = lq();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let sol = solve_mkv_fbsde(&spec, &grid, 4000, &ContinuationConfig::default(), 21).unwrap();
    let a = solve_adjoint(&spec, &grid, &sol.states, &sol.control).unwrap();
    let nt = grid.steps();
    // Pathwise representation of E[Y_0] for the standard error.
    let zeta: Vec<f64> = (0..sol.particles())
        .map(|i| {
            a.y.at(nt, i)[0]
                + (0..nt)
                    .map(|n| a.y.at(n, i)[0] - a.y_pred.at(n, i)[0])
                    .sum::<f64>()
        })
        .collect();
    let (_, se) = mfc_core::scalar::mean_and_se(&zeta);
    let y0 = a.y.step(0).iter().sum::<f64>() / sol.particles() as f64;
    let oracle = LqOracle::new(&p);
    assert!(
        (y0 - oracle.y0()).abs() <= 3.0 * se,
        "{y0} vs {} (se {se})",
        oracle.y0()
    );
}

#[test]
fn gateaux_examples() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let mm = 500;
    let control = ControlPaths::zeros(25, mm, 1);
    let s = simulate_state(&spec, &grid, &control, 4).unwrap();
    let a = solve_adjoint(&spec, &grid, &s, &control).unwrap();
    let zero = ControlPaths::zeros(25, mm, 1);
    assert_eq!(gateaux(&spec, &grid, &s, &a, &control, &zero).unwrap(), 0.0);
    let beta = ControlPaths::random_smooth(&grid, mm, 1, 9);
    let g = gateaux(&spec, &grid, &s, &a, &control, &beta).unwrap();
    let j = |e: f64| {
        let c = control.perturbed(&beta, e);
        let st = simulate_state_with(&spec, &grid, s.x.step(0), &c, s.noise.clone()).unwrap();
        cost(&spec, &grid, &st, &c)
    };
    let fd = (j(1e-4) - j(-1e-4)) / 2e-4;
    assert!((g - fd).abs() <= 1e-2 * fd.abs());
}

fn worst_stationarity(
    spec: &ModelSpec<f64>,
    grid: &TimeGrid<f64>,
    states: &StatePaths<f64>,
    adjoint: &AdjointPaths<f64>,
    control: &ControlPaths<f64>,
) -> f64 {
    (0..5)
        .map(|r| {
            let beta = ControlPaths::random_smooth(grid, control.particles(), 1, 40 + r);
            let g = gateaux(spec, grid, states, adjoint, control, &beta).unwrap();
            g.abs() / beta.norm(grid.dt())
        })
        .fold(0.0, f64::max)
}

#[test]
fn gateaux_vanishes_at_the_discrete_solution() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let res = gradient_descent_solve(&spec, &grid, 1000, 8, 0.5, 60).unwrap();
    let w = worst_stationarity(&spec, &grid, &res.states, &res.adjoint, &res.control);
    assert!(w <= 1e-2, "{w}");
}

#[test]
fn slow_descent_is_not_flagged_as_divergent() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let res = gradient_descent_solve(&spec, &grid, 1000, 12, 0.25, 60).unwrap();
    assert!(res.history.last().unwrap() < &res.history[0]);
}

#[test]
fn gateaux_at_the_fbsde_control_is_first_order_in_dt() {
    let spec = lq();
    let mut prev = f64::INFINITY;
    for nt in [25, 50] {
        let grid = TimeGrid::new(1.0, nt).unwrap();
        let sol = solve_mkv_fbsde(&spec, &grid, 1000, &ContinuationConfig::default(), 8).unwrap();
        let a = solve_adjoint(&spec, &grid, &sol.states, &sol.control).unwrap();
        let w = worst_stationarity(&spec, &grid, &sol.states, &a, &sol.control);
        assert!(w <= 2.0 * grid.dt(), "{w}");
        assert!(w <= 0.6 * prev, "{w} vs {prev}");
        prev = w;
    }
}

#[test]
fn gradient_descent_reaches_the_fbsde_cost() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let mm = 1000;
    let cfg = ContinuationConfig::default();
    let sol = solve_mkv_fbsde(&spec, &grid, mm, &cfg, 12).unwrap();
    let target = sol.summary.as_ref().unwrap().j;
    let res = gradient_descent_solve(&spec, &grid, mm, 12, 0.5, 60).unwrap();
    let last = *res.history.last().unwrap();
    assert!((last - target).abs() <= 1e-2 * target, "{last} vs {target}");
    let tol = DIVERGENCE_RTOL * target;
    assert!(res.history.windows(2).all(|w| w[1] <= w[0] + tol));

    // Starting at the optimum the first step barely moves the cost.
    let res = gradient_descent_from(
        &spec,
        &grid,
        sol.control.clone(),
        sol.states.noise.clone(),
        0.5,
        1,
    )
    .unwrap();
    let (_, se) = cost_estimate(&spec, &grid, &sol.states, &sol.control);
    assert!((res.history[1] - res.history[0]).abs() <= se);
}

#[test]
fn gradient_descent_on_the_zero_model() {
    let spec = make_zero(1, 0.3, 1.0, vec![0.0]).unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let res = gradient_descent_solve(&spec, &grid, 20, 1, 0.1, 5).unwrap();
    assert!(res.history.iter().all(|&j| j == 0.0));
    assert!(gradient_descent_solve(&spec, &grid, 20, 1, 0.0, 5).is_err());
}

#[test]
fn gradient_descent_flags_divergence() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let r = gradient_descent_solve(&spec, &grid, 50, 1, 500.0, 50);
    assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
}

#[test]
fn variation_examples() {
    let spec = make_lq_scalar(&LqParams::<f64> {
        b1: 0.4,
        ..LqParams::benchmark()
    })
    .unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let control = ControlPaths::random_smooth(&grid, 30, 1, 1);
    let zero = ControlPaths::zeros(20, 30, 1);
    let r = variation_check(&spec, &grid, &control, &zero, &[1.0, 0.1], 2).unwrap();
    assert!(r.errors.iter().all(|&e| e == 0.0));
    let beta = ControlPaths::random_smooth(&grid, 30, 1, 2);
    let eps = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-6];
    let r = variation_check(&spec, &grid, &control, &beta, &eps, 2).unwrap();
    assert!(r.errors.iter().zip(&r.floors).all(|(e, f)| e <= f));
    assert!(r.excess.windows(2).all(|w| w[1] <= w[0]));
    assert!(variation_check(&spec, &grid, &control, &beta, &[0.0], 2).is_err());
    assert!(variation_check(&spec, &grid, &control, &beta, &[1.5], 2).is_err());
}

#[test]
fn duality_holds_with_interaction() {
    let spec = make_lq_scalar(&LqParams::<f64> {
        b1: 0.4,
        cbar: 0.5,
        ..LqParams::benchmark()
    })
    .unwrap();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let control = ControlPaths::random_smooth(&grid, 1000, 1, 3);
    let s = simulate_state(&spec, &grid, &control, 3).unwrap();
    let a = solve_adjoint(&spec, &grid, &s, &control).unwrap();
    let beta = ControlPaths::random_smooth(&grid, 1000, 1, 4);
    let r = duality_check(&spec, &grid, &s, &a, &control, &beta).unwrap();
    assert!(r.gap().abs() <= 3.0 * r.se + 1e-12, "{r:?}");
}

#[test]
fn control_shape_is_checked() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let bad = ControlPaths::zeros(9, 4, 1);
    assert!(matches!(
        simulate_state(&spec, &grid, &bad, 1),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn blow_up_reports_the_step() {
    let spec = zero_cost_spec(scalar_dynamics(0.0, 0.0, 1e200, 0.0, 0.0), 1.0);
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let r = simulate_state(&spec, &grid, &ControlPaths::zeros(10, 2, 1), 1);
    assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>(), mm in 1usize..40, nt in 1usize..20) {
        let spec = lq();
        let grid = TimeGrid::new(1.0, nt).unwrap();
        let control = ControlPaths::random_rough(&grid, mm, 1, seed, 0.5);
        let a = simulate_state(&spec, &grid, &control, seed).unwrap();
        let b = simulate_state(&spec, &grid, &control, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.x.step(0).iter().all(|&v| v == spec.x0[0]));
        let noise = generate_noise(&spec, &grid, mm, seed);
        prop_assert_eq!(&*noise, &*a.noise);
    }

    #[test]
    fn linear_models_have_exact_variations(seed in any::<u64>(), b1 in -1.0..1.0f64, b2 in -1.0..1.0f64) {
        let spec = make_lq_scalar(&LqParams::<f64> { b1, b2, ..LqParams::benchmark() }).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let control = ControlPaths::random_smooth(&grid, 8, 1, seed);
        let beta = ControlPaths::random_rough(&grid, 8, 1, seed, 1.0);
        let r = variation_check(&spec, &grid, &control, &beta, &[1.0, 0.5, 1e-3], seed).unwrap();
        prop_assert!(r.excess.iter().all(|&e| e == 0.0), "{:?}", r);
    }
}
