//! Desk-scale reactor-core load-following laboratory.
//!
//! The crate couples a normalized xenon-dynamics plant model with a
//! reference stiff integrator, a dataset pipeline, and two surrogate
//! integrators: a physics-informed attention Seq2Seq model for the stiff
//! flux block and a gradient-boosted block forecaster for the full state.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gbt;
pub mod metrics;
pub mod pinn;
pub mod plant;
pub mod rng;
pub mod solver;
pub mod tensor;

pub use error::CoreError;
pub use plant::{PlantConstants, PowerProfile, State, N_STATE, N_Z};
pub use solver::{SolverConfig, StepStats};
