//! Ensemble optimal control of control-affine systems with uncertain
//! parameters.
//!
//! A single scalar control `u(t) ∈ [u_min, u_max]` drives every member of a
//! parameter ensemble `ẋ = f0(x, ω) + f1(x, ω) u`, and the objective is the
//! ensemble mean of a terminal cost. The crate provides the forward/adjoint
//! sweeps, the ensemble switching function and singular feedback law, a
//! projected-gradient solver for fixed ensembles and the sample average
//! approximation loop over growing ensembles.

pub mod cli;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod integrate;
pub mod pmp;
pub mod solver;

pub use error::{Error, Result};
