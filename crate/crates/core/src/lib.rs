//! Estimation, inference, and specification diagnostics for local
//! instrumental-variable models with unordered multi-valued treatments.
//!
//! The crate is organized around the objects of the underlying model:
//!
//! - [`typeconfig`]: the known type support and its combinatorial algebra
//!   (response matrices, pseudoinverses, identification contractions).
//! - [`nuisance`]: nonparametric first-stage fits (cell means, polynomial
//!   series) for the propensities and conditional expectations.
//! - [`estimators`]: two-step projection estimators for type probabilities
//!   and local average structural functions, their efficient influence
//!   functions, and delta-method derived parameters.
//! - [`dml`]: cross-fitted orthogonal-moment estimation.
//! - [`gmm`]: two-step optimally weighted GMM for parameters defined by
//!   possibly non-smooth moment conditions on subpopulation outcome laws.
//! - [`diagnostics`]: plug-in checks of the model's testable implications.
//! - [`simulation`]: the two built-in data generating processes and a seeded
//!   Monte Carlo harness.

mod cells;
pub mod diagnostics;
pub mod dml;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod nuisance;
mod optim;
pub mod simulation;
pub mod typeconfig;

// Re-exported so downstream users can name the matrix types in our API.
pub use nalgebra;

pub use error::{Error, ErrorKind, Result};
pub use typeconfig::TypeConfig;

// Compile the README usage example as a doctest.
#[doc = include_str!("../../../README.md")]
#[cfg(doctest)]
pub struct ReadmeDoctests;
