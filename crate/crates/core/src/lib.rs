//! Numerical workbench for a multiplexed cavity array microscope: geometry,
//! ray and paraxial resonator models, photon budgets, hologram synthesis,
//! synthetic readout data and its statistical analysis.

pub mod analysis;
pub mod atomsim;
pub mod budget;
pub mod cli;
pub mod hologram;
pub mod optim;
pub mod optics;
pub mod paraxial;
pub mod prescription;
pub mod raytrace;
pub mod rng;
pub mod scalar;
pub mod stats;

pub use scalar::Real;

pub type Abcd = paraxial::Abcd<f64>;
pub type BeamParam = paraxial::BeamParam<f64>;
pub type OpticalSystem = optics::OpticalSystem<f64>;
pub type Ray = raytrace::Ray<f64>;
