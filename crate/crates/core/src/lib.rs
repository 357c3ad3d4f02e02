//! Steady states of the radial Townsend discharge between concentric spheres.
//!
//! The crate computes the sparking voltage at which the trivial (non-ionized)
//! state loses stability, the one-dimensional nullspace of the linearization
//! there, the transversality functional that makes the bifurcation simple,
//! and the global branch of ionized steady states obtained by
//! pseudo-arclength continuation.
//!
//! Everything is posed on `r ∈ [1, 2]` (anode at `r = 1`, cathode at `r = 2`)
//! and discretized on a uniform grid with second-order stencils, except for
//! the ion transport row which is upwinded.

pub mod adjoint_transversality;
pub mod cli;
pub mod continuation;
pub mod discretization;
pub mod electron_system;
pub mod error;
pub mod linalg;
pub mod model;
pub mod steady_state;
pub mod validation;

pub use discretization::{GridFunction, RadialGrid};
pub use error::{Error, Result};
pub use model::Parameters;
