use thiserror::Error;

/// Errors raised by the solvers. Numerical failures carry enough context to
/// locate the offending step.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("particle counts differ ({left} vs {right}); exact transport needs equal counts")]
    UnequalCounts { left: usize, right: usize },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("singular regression at step {step}")]
    SingularRegression { step: usize },

    #[error("Newton minimisation of the Hamiltonian did not converge (|grad| = {residual:e})")]
    NewtonFailure { residual: f64 },

    #[error("dynamics kernel is not affine in (x, x', alpha): {0}")]
    NonAffineKernel(String),

    #[error("volatility depends on the control; closed-loop N-player construction needs it control-free")]
    ControlDependentVolatility,

    #[error("gradient descent diverged after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("continuation stalled at gamma = {gamma} (step fell below {min_step}); residual trace {trace:?}")]
    NonConvergence {
        gamma: f64,
        min_step: f64,
        trace: Vec<f64>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
