//! Run configuration: a TOML file with one table per concern.
//!
//! ```toml
//! experiment = "solve"       # solve | gradcheck | oracle | decouple | chaos
//! seed = 1
//! out = "out"                # optional; --out wins
//!
//! [model]
//! name = "lq_scalar"         # zero | lq_scalar | scalar_interaction | first_order_quadratic
//! [model.params]             # optional overrides of the model defaults
//! q = 1.0
//!
//! [grid]
//! steps = 50
//!
//! [solver]
//! particles = 2000
//! delta0 = 0.1
//! ```
//!
//! Every table and key is optional except `model.name`; unknown keys are
//! rejected.

use std::path::PathBuf;

use mfc_core::fbsde::{ContinuationConfig, InnerSolve, PicardInit, Sweep};
use mfc_core::model::{
    make_first_order, make_lq_scalar, make_scalar_interaction, make_zero, DynamicsKernels,
    InteractionParams, LqParams, ModelSpec, QuadraticPairKernel, QuadraticPairTerminal,
};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Solve,
    Gradcheck,
    Oracle,
    Decouple,
    Chaos,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::Gradcheck => "gradcheck",
            Self::Oracle => "oracle",
            Self::Decouple => "decouple",
            Self::Chaos => "chaos",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Failure> {
        toml::Value::String(s.into())
            .try_into()
            .map_err(|_| Failure::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    experiment: Option<Experiment>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
    model: RawModel,
    #[serde(default)]
    grid: GridConfig,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    gradcheck: GradcheckConfig,
    #[serde(default)]
    decouple: DecoupleConfig,
    #[serde(default)]
    chaos: ChaosConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    #[serde(default)]
    params: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub particles: usize,
    pub delta0: f64,
    pub picard_tol: f64,
    pub level_tol: f64,
    pub max_picard: usize,
    pub omega: f64,
    pub min_delta: f64,
    pub inner: InnerSolve,
    pub sweep: Sweep,
    pub init: PicardInit,
    pub degree: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let c = ContinuationConfig::<f64>::default();
        Self {
            particles: 2000,
            delta0: c.delta0,
            picard_tol: c.picard_tol,
            level_tol: c.level_tol,
            max_picard: c.max_picard,
            omega: c.omega,
            min_delta: c.min_delta,
            inner: c.inner,
            sweep: c.sweep,
            init: c.init,
            degree: c.degree,
        }
    }
}

impl SolverConfig {
    pub fn continuation(&self) -> ContinuationConfig<f64> {
        ContinuationConfig {
            delta0: self.delta0,
            picard_tol: self.picard_tol,
            level_tol: self.level_tol,
            max_picard: self.max_picard,
            omega: self.omega,
            min_delta: self.min_delta,
            inner: self.inner,
            sweep: self.sweep,
            init: self.init,
            degree: self.degree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub directions: usize,
    pub epsilon: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            directions: 5,
            epsilon: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoupleConfig {
    pub degree: usize,
    pub probes: usize,
    /// Fixed probe box; the cloud's 1-99 percentile envelope when absent.
    pub probe_lo: Option<Vec<f64>>,
    pub probe_hi: Option<Vec<f64>>,
}

impl Default for DecoupleConfig {
    fn default() -> Self {
        Self {
            degree: 1,
            probes: 200,
            probe_lo: None,
            probe_hi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaosConfig {
    pub ns: Vec<usize>,
    pub reps: usize,
    pub w2_ns: Vec<usize>,
    pub w2_reps: usize,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        Self {
            ns: vec![4, 16, 64, 256],
            reps: 8,
            w2_ns: vec![4, 16, 64, 256, 1024],
            w2_reps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroParams {
    pub d: usize,
    pub sigma0: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
}

impl Default for ZeroParams {
    fn default() -> Self {
        Self {
            d: 1,
            sigma0: 0.3,
            horizon: 1.0,
            x0: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqConfig {
    pub q: f64,
    pub qbar: f64,
    pub s: f64,
    pub r: f64,
    pub c: f64,
    pub cbar: f64,
    pub s_t: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub sigma0: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Default for LqConfig {
    fn default() -> Self {
        let p = LqParams::<f64>::benchmark();
        Self {
            q: p.q,
            qbar: p.qbar,
            s: p.s,
            r: p.r,
            c: p.c,
            cbar: p.cbar,
            s_t: p.s_t,
            b1: p.b1,
            b2: p.b2,
            b3: p.b3,
            sigma0: p.sigma0,
            horizon: p.horizon,
            x0: p.x0,
        }
    }
}

impl LqConfig {
    pub fn params(&self) -> LqParams<f64> {
        LqParams {
            q: self.q,
            qbar: self.qbar,
            s: self.s,
            r: self.r,
            c: self.c,
            cbar: self.cbar,
            s_t: self.s_t,
            b1: self.b1,
            b2: self.b2,
            b3: self.b3,
            sigma0: self.sigma0,
            horizon: self.horizon,
            x0: self.x0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionConfig {
    pub q: f64,
    pub r: f64,
    pub rho: f64,
    pub kappa: f64,
    pub s: f64,
    pub c: f64,
    pub kappa_t: f64,
    pub s_t: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub sigma0: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        let p = InteractionParams::<f64>::example();
        Self {
            q: p.q,
            r: p.r,
            rho: p.rho,
            kappa: p.kappa,
            s: p.s,
            c: p.c,
            kappa_t: p.kappa_t,
            s_t: p.s_t,
            b1: p.b1,
            b2: p.b2,
            b3: p.b3,
            sigma0: p.sigma0,
            horizon: p.horizon,
            x0: p.x0,
        }
    }
}

impl InteractionConfig {
    fn params(&self) -> InteractionParams<f64> {
        InteractionParams {
            q: self.q,
            r: self.r,
            rho: self.rho,
            kappa: self.kappa,
            s: self.s,
            c: self.c,
            kappa_t: self.kappa_t,
            s_t: self.s_t,
            b1: self.b1,
            b2: self.b2,
            b3: self.b3,
            sigma0: self.sigma0,
            horizon: self.horizon,
            x0: self.x0,
        }
    }
}

/// Scalar model whose running and terminal costs average the quadratic pair
/// kernels `(q/2)x^2 + (qbar/2)(x - x')^2 + (r/2)a^2` and
/// `(c/2)x^2 + (cbar/2)(x - x')^2` over the measure, with drift kernel
/// `b_state x + b_mean x' + b_control a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstOrderConfig {
    pub q: f64,
    pub qbar: f64,
    pub r: f64,
    pub c: f64,
    pub cbar: f64,
    pub b_state: f64,
    pub b_mean: f64,
    pub b_control: f64,
    pub sigma0: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Default for FirstOrderConfig {
    fn default() -> Self {
        Self {
            q: 1.0,
            qbar: 1.0,
            r: 1.0,
            c: 1.0,
            cbar: 0.0,
            b_state: 0.5,
            b_mean: 0.0,
            b_control: 1.0,
            sigma0: 0.3,
            horizon: 1.0,
            x0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum ModelConfig {
    Zero(ZeroParams),
    LqScalar(LqConfig),
    ScalarInteraction(InteractionConfig),
    FirstOrderQuadratic(FirstOrderConfig),
}

pub const MODEL_NAMES: [&str; 4] = [
    "zero",
    "lq_scalar",
    "scalar_interaction",
    "first_order_quadratic",
];

impl ModelConfig {
    fn resolve(raw: RawModel) -> Result<Self, Failure> {
        fn params<P: for<'de> Deserialize<'de>>(name: &str, t: toml::Table) -> Result<P, Failure> {
            toml::Value::Table(t)
                .try_into()
                .map_err(|e| Failure::Config(format!("model.params for {name}: {e}")))
        }
        let name = raw.name.as_str();
        Ok(match name {
            "zero" => Self::Zero(params(name, raw.params)?),
            "lq_scalar" => Self::LqScalar(params(name, raw.params)?),
            "scalar_interaction" => Self::ScalarInteraction(params(name, raw.params)?),
            "first_order_quadratic" => Self::FirstOrderQuadratic(params(name, raw.params)?),
            other => return Err(Failure::UnknownModel(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Zero(_) => MODEL_NAMES[0],
            Self::LqScalar(_) => MODEL_NAMES[1],
            Self::ScalarInteraction(_) => MODEL_NAMES[2],
            Self::FirstOrderQuadratic(_) => MODEL_NAMES[3],
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Self::Zero(p) => p.horizon,
            Self::LqScalar(p) => p.horizon,
            Self::ScalarInteraction(p) => p.horizon,
            Self::FirstOrderQuadratic(p) => p.horizon,
        }
    }

    pub fn build(&self) -> Result<ModelSpec<f64>, Failure> {
        let spec = match self {
            Self::Zero(p) => {
                if p.x0.len() != p.d {
                    return Err(Failure::Config(format!(
                        "zero model: x0 has {} entries but d = {}",
                        p.x0.len(),
                        p.d
                    )));
                }
                make_zero(p.d, p.sigma0, p.horizon, p.x0.clone())
            }
            Self::LqScalar(p) => make_lq_scalar(&p.params()),
            Self::ScalarInteraction(p) => make_scalar_interaction(&p.params()),
            Self::FirstOrderQuadratic(p) => {
                let (bs, bm, bc, s0) = (p.b_state, p.b_mean, p.b_control, p.sigma0);
                let kernels = DynamicsKernels::new(
                    1,
                    1,
                    1,
                    move |_t, x: &[f64], xp: &[f64], a: &[f64]| {
                        vec![bs * x[0] + bm * xp[0] + bc * a[0]]
                    },
                    move |_t, _x: &[f64], _xp: &[f64], _a: &[f64]| vec![s0],
                );
                make_first_order(
                    kernels,
                    QuadraticPairKernel {
                        q: p.q,
                        qbar: p.qbar,
                        r: p.r,
                    },
                    QuadraticPairTerminal {
                        c: p.c,
                        cbar: p.cbar,
                    },
                    0.5 * p.r,
                    p.horizon,
                    vec![p.x0],
                    0,
                )
            }
        };
        spec.map_err(|e| Failure::Config(format!("model {}: {e}", self.name())))
    }
}

/// Fully resolved configuration, as embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    pub gradcheck: GradcheckConfig,
    pub decouple: DecoupleConfig,
    pub chaos: ChaosConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub experiment: Option<Experiment>,
}

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_OUT: &str = "out";

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self, Failure> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))?;
        let cfg = Self {
            experiment: overrides
                .experiment
                .or(raw.experiment)
                .unwrap_or(Experiment::Solve),
            seed: overrides.seed.or(raw.seed).unwrap_or(DEFAULT_SEED),
            out: overrides
                .out
                .clone()
                .or(raw.out)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            model: ModelConfig::resolve(raw.model)?,
            grid: raw.grid,
            solver: raw.solver,
            gradcheck: raw.gradcheck,
            decouple: raw.decouple,
            chaos: raw.chaos,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::Config(m));
        if self.grid.steps < 1 {
            return bad("grid.steps must be at least 1".into());
        }
        if self.solver.particles < 2 {
            return bad("solver.particles must be at least 2".into());
        }
        if !(self.model.horizon() > 0.0) {
            return bad("model horizon must be positive".into());
        }
        self.solver
            .continuation()
            .validate()
            .map_err(|e| Failure::Config(format!("solver: {e}")))?;
        if self.gradcheck.directions == 0 || !(self.gradcheck.epsilon > 0.0) {
            return bad("gradcheck needs at least one direction and a positive epsilon".into());
        }
        if self.decouple.probes == 0 || self.decouple.degree > mfc_core::regression::MAX_DEGREE {
            return bad("decouple needs probes >= 1 and degree <= 3".into());
        }
        if self.decouple.probe_lo.is_some() != self.decouple.probe_hi.is_some() {
            return bad("decouple.probe_lo and probe_hi go together".into());
        }
        let c = &self.chaos;
        if c.reps == 0 || c.w2_reps < 2 || c.ns.is_empty() || c.w2_ns.is_empty() {
            return bad("chaos needs reps >= 1, w2_reps >= 2 and nonempty ns and w2_ns".into());
        }
        for (name, ns) in [("ns", &c.ns), ("w2_ns", &c.w2_ns)] {
            if ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!(
                    "chaos.{name} must be positive and strictly increasing"
                ));
            }
        }
        if self.experiment == Experiment::Oracle && !matches!(self.model, ModelConfig::LqScalar(_))
        {
            return bad(format!(
                "the oracle experiment needs lq_scalar, not {}",
                self.model.name()
            ));
        }
        self.model.build().map(|_| ())
    }
}
