//! Particle solvers for optimal control of McKean-Vlasov dynamics through the
//! stochastic maximum principle.

pub mod chaos;
pub mod decoupling;
pub mod error;
pub mod fbsde;
pub mod hamiltonian;
pub mod linalg;
pub mod maxprinciple;
pub mod measure;
pub mod model;
pub mod noise;
pub mod paths;
pub mod regression;
pub mod riccati;
pub mod scalar;

pub use error::{Error, Result};
pub use measure::ParticleCloud;
pub use scalar::Real;

pub type Cloud64 = measure::ParticleCloud<f64>;
pub type Cloud32 = measure::ParticleCloud<f32>;
pub type Spec64 = model::ModelSpec<f64>;
pub type Spec32 = model::ModelSpec<f32>;
pub type Grid64 = maxprinciple::TimeGrid<f64>;
pub type Grid32 = maxprinciple::TimeGrid<f32>;
pub type Controls64 = maxprinciple::ControlPaths<f64>;
pub type Controls32 = maxprinciple::ControlPaths<f32>;
pub type Solution64 = fbsde::FbsdeSolution<f64>;
pub type Solution32 = fbsde::FbsdeSolution<f32>;
pub type Config64 = fbsde::ContinuationConfig<f64>;
pub type Config32 = fbsde::ContinuationConfig<f32>;
pub type Field64 = decoupling::DecouplingField<f64>;
pub type Field32 = decoupling::DecouplingField<f32>;
