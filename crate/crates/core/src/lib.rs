//! Risk-aware engine combustion calibration.
//!
//! Cylinder pressure is compressed into a few principal-component weights,
//! the weights are regressed on the actuator settings with Gaussian
//! processes, and a particle swarm searches the acquisition surface under
//! probabilistic constraints on peak pressure, pressure rise rate and load.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod calibration;
pub mod config;
pub mod constraints;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod gpr;
pub mod itc;
pub mod optim;
pub mod pcd;
pub mod pso;
pub mod seed;

pub use error::{CalibError, Result};
