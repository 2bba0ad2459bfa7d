//! Simulation laboratory for the one-dimensional dynamic random conductance model.
//!
//! The crate is split along the lines of the experiment pipeline:
//!
//! - [`env`]: time-dependent conductance fields on a periodic ring, their
//!   time-space shifts and the vertex measures `mu` / `nu`.
//! - [`walk`]: exact event-driven simulation of the time-inhomogeneous walk.
//! - [`corrector`]: harmonic coordinates and the corrector on periodic
//!   volumes, the effective variance and sublinearity diagnostics.
//! - [`norms`]: averaged space-time norms, Dirichlet forms, the local
//!   Sobolev inequality and the moment-condition predicates.
//! - [`stats`]: Monte Carlo ensembles and the statistical checks built on them.

pub mod corrector;
pub mod env;
pub mod error;
pub mod norms;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
