//! Identification of spatially distributed, optionally time-varying reaction
//! and diffusion coefficients in parabolic PDEs from noisy observations.
//!
//! The crate provides the full-order iteratively regularized Gauss-Newton
//! method and its certified trust-region reduced-basis variant, together
//! with the finite element machinery, the Tikhonov subproblem solver, POD
//! based basis construction, and residual-based error estimation they rely
//! on. The `parident` binary exposes benchmark runs on top of this library.

pub mod error;
pub mod fem;
pub mod fom;
pub mod irgnm;
pub mod reduction;
pub mod rom;
pub mod subproblem;

pub use error::{Error, Result};
pub use fem::{Mesh, PdeKind, SparseOperator};
pub use fom::{FomProblem, Observation, ParamSpace, ParameterField, StateTrajectory};
