#![allow(dead_code)]

use mfc_core::model::{
    CostModel, DynamicsAt, LinearDynamics, MeanFieldRunning, MeanFieldTerminal, ModelSpec,
    ThroughMean, ZeroCost,
};

/// `f = value`, independent of everything.
pub struct ConstantRunning(pub f64);

impl MeanFieldRunning<f64> for ConstantRunning {
    fn value(&self, _t: f64, _x: &[f64], _mean: &[f64], _a: &[f64]) -> f64 {
        self.0
    }
    fn dx(&self, _t: f64, _x: &[f64], _mean: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dmean(&self, _t: f64, _x: &[f64], _mean: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dalpha(&self, _t: f64, _x: &[f64], _mean: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `g(x) = x`.
pub struct LinearTerminal;

impl MeanFieldTerminal<f64> for LinearTerminal {
    fn value(&self, x: &[f64], _mean: &[f64]) -> f64 {
        x[0]
    }
    fn dx(&self, _x: &[f64], _mean: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn dmean(&self, _x: &[f64], _mean: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
}

/// Scalar model with constant coefficients `(b0, b1, b2, b3, s0)` and zero cost.
pub fn scalar_dynamics(b0: f64, b1: f64, b2: f64, b3: f64, s0: f64) -> LinearDynamics<f64> {
    LinearDynamics::constant(DynamicsAt::scalar(b0, b1, b2, b3, s0, 0.0, 0.0, 0.0)).unwrap()
}

pub fn zero_cost_spec(dynamics: LinearDynamics<f64>, x0: f64) -> ModelSpec<f64> {
    ModelSpec::new(
        "test",
        dynamics,
        CostModel::new(ZeroCost, ZeroCost, 0.0),
        1.0,
        vec![x0],
    )
    .unwrap()
}

pub fn constant_cost_spec(value: f64) -> ModelSpec<f64> {
    ModelSpec::new(
        "constant",
        scalar_dynamics(0.0, 0.0, 0.0, 1.0, 0.2),
        CostModel::new(ThroughMean(ConstantRunning(value)), ZeroCost, 0.0),
        1.0,
        vec![0.0],
    )
    .unwrap()
}

pub fn linear_terminal_spec(sigma0: f64) -> ModelSpec<f64> {
    ModelSpec::new(
        "linear_terminal",
        scalar_dynamics(0.0, 0.0, 0.0, 1.0, sigma0),
        CostModel::new(ZeroCost, ThroughMean(LinearTerminal), 0.0),
        1.0,
        vec![0.5],
    )
    .unwrap()
}
