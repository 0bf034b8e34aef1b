//! Numerical toolkit for optimal control of backward stochastic differential
//! equations: least-squares Monte Carlo solver for the controlled BSDE
//! `dy = b(t, y, z, v) dt + z dW`, `y_T = xi`, adjoint processes and
//! Hamiltonian maximum-condition checks in strict, restricted and relaxed
//! (measure-valued) form, a chattering approximation with stability
//! diagnostics, and a brute-force enumeration oracle for desk-scale test
//! problems.
//!
//! Everything is pure given `(inputs, seed)`: Monte Carlo paths draw from
//! per-path counter-based substreams, reductions run in a fixed order, and
//! repeated runs are bit-identical.

pub mod adjoint;
pub mod cli;
pub mod criteria;
pub mod error;
pub mod export;
pub mod maximum_principle;
pub mod model;
pub mod problems;
pub mod regression;
pub mod relaxed;
pub mod restriction;
pub mod solver;

pub use error::{Error, Result};
pub use model::{
    build_grid, sample_brownian, validate_spec, BrownianBundle, ControlLaw, ControlSet,
    Dimensions, ProblemSpec, TimeGrid,
};
pub use regression::{regress, RegressionConfig, Ridge};
pub use solver::{evaluate_cost, solve_bsde, CostEstimate, Trajectory};

/// Version stamp embedded in every artifact for replay.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
