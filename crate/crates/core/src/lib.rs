//! Penalized gradient-constrained incompressible flow on staggered grids.
//!
//! The crate time-steps the exponentially penalized Navier-Stokes/Euler
//! system whose shear rate `|Du|` is held below a threshold `psi`, recovers
//! the associated Lagrange multiplier, and solves the quasi-variational
//! problem `psi = Psi[u]` by fixed-point iteration with an explicit
//! contraction budget. A 1D projected solver provides independent ground
//! truth for the penalty limit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraints;
pub mod error;
pub mod grid;
pub mod harness;
pub mod multiplier;
pub mod oracle;
pub mod penalty;
pub mod qvi;
pub mod sparse;
pub mod stepper;

pub use constraints::{
    KernelFunctional, NormFunctional, ThresholdBounds, ThresholdProvider, ThresholdSource,
};
pub use error::{Error, Result};
pub use grid::{Domain, Grid, ScalarField, TensorField, VelocityField};
pub use harness::{ExperimentConfig, RunRecord};
pub use multiplier::MultiplierField;
pub use oracle::{Oracle1DProblem, Trajectory1D};
pub use penalty::PenaltyParams;
pub use qvi::{ContractionBudget, FixedPointHistory};
pub use stepper::{FlowState, ForceProvider, InnerSolver, SolverConfig, Stepper, Trajectory};
