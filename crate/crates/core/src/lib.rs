//! Kernel ridge regression for panel data with interactive fixed effects.
//!
//! The estimators here fit outcome panels `Y_it = g_i(X_it) + Z_t' beta_i +
//! e_it` where the nonparametric part lives in a reproducing-kernel space
//! and the design `Z_t` augments observed factors with cross-section
//! covariate means to absorb unobserved common shocks. Two variants are
//! provided: a per-unit fit with unit-specific functions (`hetero`) and a
//! pooled fit with one common function (`homo`). On top of the fits sit
//! pointwise confidence and prediction intervals (`inference`) and a Monte
//! Carlo lab for bias/variance and coverage studies (`simlab`).
//!
//! All numeric paths are deterministic: linear algebra runs single-threaded
//! regardless of ambient thread pools, and every simulation consumes
//! counter-based RNG streams, so identical configurations reproduce
//! identical results bit for bit at any concurrency level.

pub mod cli;
pub mod error;
pub mod gcv;
pub mod hetero;
pub mod homo;
pub mod io;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod panel;
pub mod simlab;

pub use error::{Error, Result};
pub use kernel::KernelSpec;
pub use panel::PanelData;
