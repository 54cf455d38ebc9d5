//! Image-sequence regression with neural-ODE velocity fields.
//!
//! A baseline image is deformed along a trajectory `dq/dt = v_θ(q, t)` whose
//! parameters are fitted so that the warped baseline matches every observed
//! frame at its timestamp. Gradients flow through the ODE solver with the
//! adjoint sensitivity method, and the fitted trajectory can be evaluated at
//! any time in `[0, 1]` to predict unseen frames.
//!
//! Modules, bottom-up:
//! - [`grid`]: lattice containers, interpolation, warping, finite differences
//! - [`odeint`]: fixed-step Euler/RK4 and adjoint/direct gradients
//! - [`model`]: the velocity network, encoder/decoder, checkpoints
//! - [`objective`]: NCC loss, regularizers, evaluation metrics
//! - [`train`]: Adam and the fitting loop, prediction
//! - [`data`]: synthetic sequences, the NDGR grid format, manifests
//! - [`cli`]: command implementations behind the `odereg` binary

pub mod cli;
pub mod data;
pub mod grid;
pub mod model;
pub mod objective;
pub mod odeint;
pub mod train;

pub use grid::{Field, ScalarGrid, VectorGrid, VoxelCloud};
pub use model::{Arch, Mode, VelocityModel};
pub use odeint::{Method, SolverConfig};
