//! Asymptotic-preserving operator networks for the multiscale linear
//! transport equation.
//!
//! The crate trains DeepONet-style surrogates for the solution operator of
//! the 1D transport equation under diffusive scaling and validates them
//! against a kinetic reference solver that is uniformly accurate in the
//! Knudsen number.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nets;
pub mod params;
pub mod physics;
pub mod quadrature;
pub mod refsolve;
pub mod train;

pub use error::{Error, Result};
pub use quadrature::GaussLegendre;
