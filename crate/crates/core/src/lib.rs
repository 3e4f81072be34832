//! Multi-fidelity pipeline for steady heat conduction in two-phase
//! microstructures: conductivity generation, bilinear FEM, max-pool
//! condensation, an energy-trained coarse operator network and
//! microstructure-embedded upscaling back to full resolution.

pub mod dataset;
pub mod error;
pub mod fem;
pub mod field;
pub mod fol;
pub mod harness;
pub mod microgen;
pub mod models;
pub mod nn;
pub mod split;

pub use error::{MeaError, Result};
pub use field::{build_stack, condense_max, resample, MultiResStack, ScalarField};
