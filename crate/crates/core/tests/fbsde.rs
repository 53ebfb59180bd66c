mod common;

use std::sync::Arc;

use common::scalar_dynamics;
use mfc_core::fbsde::{
    cost_summary, i_norm, picard_map, residual, s_distance, s_norm, solve_decoupled,
    solve_decoupled_with, solve_e, solve_e_with, solve_mkv_fbsde, solve_mkv_fbsde_from,
    ContinuationConfig, Diagnostics, FbsdeSolution, InnerSolve, InputProcess, PicardInit, Sweep,
};
use mfc_core::maxprinciple::{
    generate_noise, AdjointPaths, ControlPaths, StatePaths, TimeGrid, DEFAULT_BASIS_DEGREE,
};
use mfc_core::model::{
    make_lq_scalar, make_scalar_interaction, make_zero, CostModel, InteractionParams, LqParams,
    ModelSpec, ZeroCost,
};
use mfc_core::noise::NoiseBank;
use mfc_core::paths::PathArray;
use mfc_core::{Error, ParticleCloud};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lq() -> ModelSpec<f64> {
    make_lq_scalar(&LqParams::benchmark()).unwrap()
}

fn cfg() -> ContinuationConfig<f64> {
    ContinuationConfig::default()
}

fn random_array(rng: &mut ChaCha8Rng, steps: usize, mm: usize, w: usize) -> PathArray<f64> {
    let data = (0..steps * mm * w)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    PathArray::from_vec(steps, mm, w, data)
}

fn fake_solution(nt: usize, mm: usize, seed: u64) -> FbsdeSolution<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Arc::new(NoiseBank::generate(seed, 0, mm, nt, 1, 1.0 / nt as f64));
    FbsdeSolution {
        states: StatePaths {
            x: random_array(&mut rng, nt + 1, mm, 1),
            noise,
        },
        adjoint: AdjointPaths {
            y: random_array(&mut rng, nt + 1, mm, 1),
            z: random_array(&mut rng, nt, mm, 1),
            y_pred: random_array(&mut rng, nt, mm, 1),
        },
        control: ControlPaths {
            values: random_array(&mut rng, nt, mm, 1),
        },
        gamma: 1.0,
        diagnostics: Diagnostics::default(),
        summary: None,
    }
}

fn zeroed(sol: &FbsdeSolution<f64>) -> FbsdeSolution<f64> {
    let mut out = sol.clone();
    for a in [
        &mut out.states.x,
        &mut out.adjoint.y,
        &mut out.adjoint.z,
        &mut out.adjoint.y_pred,
        &mut out.control.values,
    ] {
        a.as_mut_slice().fill(0.0);
    }
    out
}

fn naive_s_norm(sol: &FbsdeSolution<f64>, dt: f64) -> f64 {
    let (x, y, z, a) = (
        &sol.states.x,
        &sol.adjoint.y,
        &sol.adjoint.z,
        &sol.control.values,
    );
    let mm = x.particles();
    let mut total = 0.0;
    for i in 0..mm {
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        for n in 0..x.steps() {
            sx = sx.max(x.at(n, i)[0].powi(2));
            sy = sy.max(y.at(n, i)[0].powi(2));
        }
        let mut int = 0.0;
        for n in 0..z.steps() {
            int += (z.at(n, i)[0].powi(2) + a.at(n, i)[0].powi(2)) * dt;
        }
        total += sx + sy + int;
    }
    (total / mm as f64).sqrt()
}

fn random_input(nt: usize, mm: usize, seed: u64) -> InputProcess<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InputProcess {
        i_b: random_array(&mut rng, nt, mm, 1),
        i_sigma: random_array(&mut rng, nt, mm, 1),
        i_f: random_array(&mut rng, nt, mm, 1),
        i_g: random_array(&mut rng, 1, mm, 1),
    }
}

#[test]
fn s_norm_examples() {
    let sol = fake_solution(6, 5, 1);
    let zero = zeroed(&sol);
    assert_eq!(s_norm(&zero, 0.1), 0.0);
    let mut constant = zero.clone();
    constant.states.x.as_mut_slice().fill(-1.7);
    assert!((s_norm(&constant, 0.1) - 1.7).abs() <= 1e-15);
    assert!((s_norm(&sol, 0.1) - naive_s_norm(&sol, 0.1)).abs() <= 1e-12);
    assert!((s_distance(&sol, &zero, 0.1) - s_norm(&sol, 0.1)).abs() <= 1e-12);
    assert_eq!(s_distance(&sol, &sol, 0.1), 0.0);
}

#[test]
fn i_norm_examples() {
    let zero = InputProcess::<f64>::zeros(4, 3, 1, 1);
    assert_eq!(i_norm(&zero, 0.25), 0.0);
    let mut g = zero.clone();
    g.i_g.as_mut_slice().fill(3.0);
    assert!((i_norm(&g, 0.25) - 3.0).abs() <= 1e-15);
    let input = random_input(4, 3, 2);
    let mut total = 0.0;
    for i in 0..3 {
        let mut acc = input.i_g.at(0, i)[0].powi(2);
        for n in 0..4 {
            acc += (input.i_b.at(n, i)[0].powi(2)
                + input.i_sigma.at(n, i)[0].powi(2)
                + input.i_f.at(n, i)[0].powi(2))
                * 0.25;
        }
        total += acc;
    }
    assert!((i_norm(&input, 0.25) - (total / 3.0).sqrt()).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn s_norm_is_homogeneous_and_symmetric(seed in 0u64..1000, c in -3.0..3.0f64) {
        let a = fake_solution(5, 4, seed);
        let b = fake_solution(5, 4, seed + 1);
        let mut scaled = a.clone();
        for arr in [&mut scaled.states.x, &mut scaled.adjoint.y, &mut scaled.adjoint.z, &mut scaled.control.values] {
            for v in arr.as_mut_slice() {
                *v *= c;
            }
        }
        prop_assert!((s_norm(&scaled, 0.2) - c.abs() * s_norm(&a, 0.2)).abs() <= 1e-12);
        prop_assert!((s_distance(&a, &b, 0.2) - s_distance(&b, &a, 0.2)).abs() <= 1e-12);
        let zero = zeroed(&a);
        prop_assert!(s_distance(&a, &b, 0.2) <= s_distance(&a, &zero, 0.2) + s_distance(&zero, &b, 0.2) + 1e-12);
    }

    #[test]
    fn i_norm_is_homogeneous(seed in 0u64..1000, c in -3.0..3.0f64) {
        let input = random_input(5, 4, seed);
        let mut scaled = InputProcess::zeros(5, 4, 1, 1);
        scaled.add_scaled(&input, c);
        prop_assert!((i_norm(&scaled, 0.2) - c.abs() * i_norm(&input, 0.2)).abs() <= 1e-12);
    }
}

#[test]
fn decoupled_solve_without_input_stays_put() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 50);
    let input = InputProcess::zeros(10, 50, 1, 1);
    let sol = solve_decoupled(&spec, &grid, &xi, &input, 3).unwrap();
    assert!(sol.states.x.as_slice().iter().all(|&v| v == 1.0));
    assert!(sol.adjoint.y.as_slice().iter().all(|&v| v == 0.0));
    assert!(sol.adjoint.z.as_slice().iter().all(|&v| v == 0.0));
    assert!(sol.control.values.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn decoupled_solve_with_unit_drift_input() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 20);
    let mut input = InputProcess::zeros(10, 20, 1, 1);
    input.i_b.as_mut_slice().fill(1.0);
    let sol = solve_decoupled(&spec, &grid, &xi, &input, 3).unwrap();
    for i in 0..20 {
        assert!((sol.states.x.at(10, i)[0] - 2.0).abs() <= 1e-12);
    }
    assert!(sol.adjoint.y.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn decoupled_solve_reads_a_deterministic_terminal() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 20);
    let mut input = InputProcess::zeros(10, 20, 1, 1);
    input.i_b.as_mut_slice().fill(0.5);
    input.i_g.as_mut_slice().fill(1.5);
    let sol = solve_decoupled(&spec, &grid, &xi, &input, 3).unwrap();
    for n in 0..=10 {
        for i in 0..20 {
            assert!((sol.adjoint.y.at(n, i)[0] - 1.5).abs() <= 1e-12);
        }
    }
    assert!(sol.adjoint.z.as_slice().iter().all(|v| v.abs() <= 1e-12));
}

#[test]
fn decoupled_solve_of_a_martingale_terminal() {
    // X = x0 + W and Y_T = X_T, so Y_n = X_n and Z = 1.
    let spec = lq();
    let nt = 20;
    let mm = 4000;
    let grid = TimeGrid::new(1.0, nt).unwrap();
    let xi = ParticleCloud::dirac(&[0.0], mm);
    let mut input = InputProcess::zeros(nt, mm, 1, 1);
    input.i_sigma.as_mut_slice().fill(1.0);
    let noise = generate_noise(&spec, &grid, mm, 5);
    let mut x_t = vec![0.0; mm];
    for (i, v) in x_t.iter_mut().enumerate() {
        for n in 0..nt {
            *v += noise.increments.at(n, i)[0];
        }
    }
    input.i_g = PathArray::from_vec(1, mm, 1, x_t);
    let sol = solve_decoupled_with(&spec, &grid, &xi, &input, noise, DEFAULT_BASIS_DEGREE).unwrap();
    for n in 1..nt {
        let worst = (0..mm)
            .map(|i| (sol.adjoint.y.at(n, i)[0] - sol.states.x.at(n, i)[0]).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.1, "step {n}: {worst}");
        let zbar = sol.adjoint.z.step_mean(n)[0];
        assert!((zbar - 1.0).abs() <= 0.1, "step {n}: {zbar}");
    }
}

#[test]
fn gamma_zero_is_the_decoupled_solve() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 100);
    let input = random_input(10, 100, 4);
    let a = solve_e(&spec, &grid, 0.0, &xi, &input, &cfg(), 6).unwrap();
    let b = solve_decoupled(&spec, &grid, &xi, &input, 6).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.adjoint, b.adjoint);
    assert_eq!(a.control, b.control);
}

#[test]
fn picard_map_at_gamma_zero_solves_the_assembled_input() {
    // Zero model: b = 0, sigma = s0 and no cost, so F(theta) = (0, s0, 0, 0).
    let s0 = 0.4;
    let spec = make_zero(1, s0, 1.0, vec![0.5]).unwrap();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let xi = ParticleCloud::dirac(&[0.5], 60);
    let input = random_input(8, 60, 7);
    let theta = solve_decoupled(&spec, &grid, &xi, &input, 11).unwrap();
    let eta = 0.3;
    let out = picard_map(&spec, &grid, 0.0, eta, &xi, &input, &theta, &cfg()).unwrap();
    let mut assembled = input.clone();
    for v in assembled.i_sigma.as_mut_slice() {
        *v += eta * s0;
    }
    let noise = theta.states.noise.clone();
    let direct =
        solve_decoupled_with(&spec, &grid, &xi, &assembled, noise, DEFAULT_BASIS_DEGREE).unwrap();
    assert!(s_distance(&out, &direct, grid.dt()) <= 1e-12);
}

#[test]
fn picard_map_without_perturbation_ignores_its_input() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 80);
    let input = InputProcess::zeros(8, 80, 1, 1);
    let a = solve_decoupled(&spec, &grid, &xi, &input, 2).unwrap();
    let b = solve_e(&spec, &grid, 0.5, &xi, &input, &cfg(), 2).unwrap();
    let pa = picard_map(&spec, &grid, 0.3, 0.0, &xi, &input, &a, &cfg()).unwrap();
    let pb = picard_map(&spec, &grid, 0.3, 0.0, &xi, &input, &b, &cfg()).unwrap();
    assert_eq!(s_distance(&pa, &pb, grid.dt()), 0.0);
}

#[test]
fn picard_map_contracts_for_small_eta() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 500);
    let input = InputProcess::zeros(10, 500, 1, 1);
    let a = solve_decoupled(&spec, &grid, &xi, &input, 13).unwrap();
    let b = solve_e(&spec, &grid, 1.0, &xi, &input, &cfg(), 13).unwrap();
    let dt = grid.dt();
    let pa = picard_map(&spec, &grid, 0.0, 0.05, &xi, &input, &a, &cfg()).unwrap();
    let pb = picard_map(&spec, &grid, 0.0, 0.05, &xi, &input, &b, &cfg()).unwrap();
    let ratio = s_distance(&pa, &pb, dt) / s_distance(&a, &b, dt);
    assert!(ratio <= 0.9, "{ratio}");
}

#[test]
fn picard_map_rejects_bad_weights() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 10);
    let input = InputProcess::zeros(4, 10, 1, 1);
    let a = solve_decoupled(&spec, &grid, &xi, &input, 1).unwrap();
    for (g, e) in [(0.8, 0.3), (-0.1, 0.1), (0.5, -0.1)] {
        assert!(matches!(
            picard_map(&spec, &grid, g, e, &xi, &input, &a, &cfg()),
            Err(Error::InvalidParameter(_))
        ));
    }
}

#[test]
fn converged_solution_is_a_fixed_point() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let mm = 400;
    let c = cfg();
    let sol = solve_mkv_fbsde(&spec, &grid, mm, &c, 21).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], mm);
    let input = InputProcess::zeros(10, mm, 1, 1);
    let dt = grid.dt();
    let bound = 10.0 * c.picard_tol * (1.0 + s_norm(&sol, dt));
    for (g, e) in [(0.0, 1.0), (0.9, 0.1)] {
        let image = picard_map(&spec, &grid, g, e, &xi, &input, &sol, &c).unwrap();
        let dist = s_distance(&sol, &image, dt);
        assert!(dist <= bound, "gamma {g}: {dist} vs {bound}");
    }
}

#[test]
fn engines_agree() {
    let spec = make_scalar_interaction(&InteractionParams::example()).unwrap();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let mm = 200;
    let dt = grid.dt();
    let base = solve_mkv_fbsde(&spec, &grid, mm, &cfg(), 17).unwrap();
    let scale = 1.0 + s_norm(&base, dt);
    let variants = [
        ContinuationConfig {
            sweep: Sweep::Jacobi,
            ..cfg()
        },
        ContinuationConfig {
            init: PicardInit::Zero,
            ..cfg()
        },
        ContinuationConfig {
            delta0: 0.25,
            ..cfg()
        },
        ContinuationConfig {
            delta0: 1.0,
            ..cfg()
        },
    ];
    for v in variants {
        let other = solve_mkv_fbsde(&spec, &grid, mm, &v, 17).unwrap();
        let dist = s_distance(&base, &other, dt);
        assert!(dist <= 10.0 * v.picard_tol * scale, "{v:?}: {dist}");
    }
}

#[test]
fn nested_engine_agrees_with_flat() {
    let spec = make_scalar_interaction(&InteractionParams::example()).unwrap();
    let grid = TimeGrid::new(1.0, 6).unwrap();
    let dt = grid.dt();
    let flat = solve_mkv_fbsde(&spec, &grid, 100, &cfg(), 17).unwrap();
    let c = ContinuationConfig {
        inner: InnerSolve::Nested,
        delta0: 0.5,
        ..cfg()
    };
    let nested = solve_mkv_fbsde(&spec, &grid, 100, &c, 17).unwrap();
    let dist = s_distance(&flat, &nested, dt);
    assert!(
        dist <= 10.0 * c.picard_tol * (1.0 + s_norm(&flat, dt)),
        "{dist}"
    );
}

#[test]
fn solves_are_deterministic() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let a = solve_mkv_fbsde(&spec, &grid, 300, &cfg(), 5).unwrap();
    let b = solve_mkv_fbsde(&spec, &grid, 300, &cfg(), 5).unwrap();
    assert_eq!(a, b);
    let c = solve_mkv_fbsde(&spec, &grid, 300, &cfg(), 6).unwrap();
    assert_ne!(a.states, c.states);
}

#[test]
fn stability_in_the_initial_law() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let mm = 300;
    let dt = grid.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut constants = Vec::new();
    for case in 0..10 {
        let base: Vec<f64> = (0..mm)
            .map(|_| 1.0 + 0.3 * rng.random_range(-1.0..1.0))
            .collect();
        let shift = 0.05 * (case + 1) as f64;
        let other: Vec<f64> = base
            .iter()
            .map(|v| v + shift * rng.random_range(-1.0..1.0))
            .collect();
        let gap = (base
            .iter()
            .zip(&other)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / mm as f64)
            .sqrt();
        let a = solve_mkv_fbsde_from(
            &spec,
            &grid,
            &ParticleCloud::from_scalars(&base).unwrap(),
            &cfg(),
            4,
        )
        .unwrap();
        let b = solve_mkv_fbsde_from(
            &spec,
            &grid,
            &ParticleCloud::from_scalars(&other).unwrap(),
            &cfg(),
            4,
        )
        .unwrap();
        constants.push(s_distance(&a, &b, dt) / gap);
    }
    let worst = constants.iter().cloned().fold(0.0, f64::max);
    eprintln!("stability constants {constants:?}");
    assert!(worst.is_finite() && worst > 0.0);
    assert!(constants.iter().all(|&c| c <= 2.0 * worst));
}

#[test]
fn residual_of_a_converged_solution() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = cfg();
    let sol = solve_mkv_fbsde(&spec, &grid, 400, &c, 8).unwrap();
    let scale = 1.0 + s_norm(&sol, grid.dt());
    let report = residual(&spec, &grid, &sol, DEFAULT_BASIS_DEGREE).unwrap();
    assert!(report.max() <= 10.0 * c.picard_tol * scale, "{report:?}");

    let mut corrupted = sol.clone();
    for v in corrupted.adjoint.y.as_mut_slice() {
        *v *= 2.0;
    }
    let bad = residual(&spec, &grid, &corrupted, DEFAULT_BASIS_DEGREE).unwrap();
    let y_t = sol
        .adjoint
        .y
        .step(10)
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    assert!((bad.terminal - y_t).abs() <= 1e-9 * y_t, "{bad:?} vs {y_t}");
    assert!(bad.max() > 1e3 * report.max());
}

#[test]
fn zero_model() {
    let spec = make_zero(1, 0.3, 1.0, vec![0.2]).unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let sol = solve_mkv_fbsde(&spec, &grid, 100, &cfg(), 3).unwrap();
    let summary = sol.summary.as_ref().unwrap();
    assert_eq!(summary.j, 0.0);
    assert!(sol.adjoint.y.as_slice().iter().all(|&v| v == 0.0));
    assert!(sol.control.values.as_slice().iter().all(|&v| v == 0.0));
    for i in 0..100 {
        let mut x = 0.2;
        for n in 0..10 {
            x += 0.3 * sol.states.noise.increments.at(n, i)[0];
            assert!((sol.states.x.at(n + 1, i)[0] - x).abs() <= 1e-12);
        }
    }
    let report = residual(&spec, &grid, &sol, DEFAULT_BASIS_DEGREE).unwrap();
    assert_eq!(report.max(), 0.0);
}

#[test]
fn drift_only_model_with_zero_cost() {
    let spec = ModelSpec::new(
        "drift",
        scalar_dynamics(1.0, 0.0, 0.0, 0.0, 0.2),
        CostModel::new(ZeroCost, ZeroCost, 0.0),
        1.0,
        vec![0.0],
    )
    .unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let sol = solve_mkv_fbsde(&spec, &grid, 2000, &cfg(), 3).unwrap();
    assert!((sol.states.x.step_mean(10)[0] - 1.0).abs() <= 3.0 * 0.2 / (2000f64).sqrt());
    assert_eq!(cost_summary(&spec, &grid, &sol).j, 0.0);
}

#[test]
fn config_is_validated() {
    let bad = [
        ContinuationConfig {
            delta0: 0.0,
            ..cfg()
        },
        ContinuationConfig {
            delta0: 1.5,
            ..cfg()
        },
        ContinuationConfig {
            omega: 0.0,
            ..cfg()
        },
        ContinuationConfig {
            picard_tol: 0.0,
            ..cfg()
        },
        ContinuationConfig {
            level_tol: -1.0,
            ..cfg()
        },
        ContinuationConfig {
            max_picard: 0,
            ..cfg()
        },
        ContinuationConfig { degree: 9, ..cfg() },
    ];
    for c in bad {
        assert!(
            matches!(c.validate(), Err(Error::InvalidParameter(_))),
            "{c:?}"
        );
    }
    assert!(cfg().validate().is_ok());
    let spec = lq();
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 10);
    let input = InputProcess::zeros(4, 10, 1, 1);
    assert!(solve_e(&spec, &grid, 1.2, &xi, &input, &cfg(), 1).is_err());
    assert!(solve_mkv_fbsde(&spec, &grid, 1, &cfg(), 1).is_err());
    let short = InputProcess::zeros(3, 10, 1, 1);
    assert!(solve_decoupled(&spec, &grid, &xi, &short, 1).is_err());
}

#[test]
fn stalled_continuation_reports_its_trace() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = ContinuationConfig {
        max_picard: 1,
        picard_tol: 1e-14,
        level_tol: 1e-14,
        min_delta: 0.05,
        ..cfg()
    };
    match solve_mkv_fbsde(&spec, &grid, 100, &c, 1) {
        Err(Error::NonConvergence {
            trace, min_step, ..
        }) => {
            assert_eq!(min_step, 0.05);
            assert!(!trace.is_empty());
        }
        other => panic!("expected non-convergence, got {:?}", other.map(|s| s.gamma)),
    }
}

#[test]
fn control_satisfies_the_optimality_condition() {
    let spec = make_scalar_interaction(&InteractionParams::example()).unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let sol = solve_mkv_fbsde(&spec, &grid, 300, &cfg(), 2).unwrap();
    let report = residual(&spec, &grid, &sol, DEFAULT_BASIS_DEGREE).unwrap();
    assert!(report.stationarity <= 1e-9, "{report:?}");
}

#[test]
fn solve_e_accepts_shared_noise() {
    let spec = lq();
    let grid = TimeGrid::new(1.0, 6).unwrap();
    let xi = ParticleCloud::dirac(&[1.0], 50);
    let input = InputProcess::zeros(6, 50, 1, 1);
    let noise = generate_noise(&spec, &grid, 50, 9);
    let a = solve_e_with(&spec, &grid, 0.7, &xi, &input, &cfg(), noise).unwrap();
    let b = solve_e(&spec, &grid, 0.7, &xi, &input, &cfg(), 9).unwrap();
    assert_eq!(a.adjoint, b.adjoint);
    assert!((a.gamma - 0.7).abs() <= 1e-15);
}
