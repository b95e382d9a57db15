//! Numerical laboratory for mean field type control in the lifted Hilbert-space
//! formulation: particle ensembles as elements of L²(Ω; Rⁿ), a Picard solver for the
//! forward-backward optimality system, value-function derivatives and residual checks,
//! and an independent 1D HJB-Fokker-Planck grid solver.

pub mod ensemble;
pub mod error;
pub mod fbsde;
pub mod functionals;
pub mod hjbfp;
pub mod numeric;
pub mod regression;
pub mod riccati;
pub mod rng;
pub mod value;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
