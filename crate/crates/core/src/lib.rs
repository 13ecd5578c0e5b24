//! Quantum property testing over explicit density matrices.
//!
//! States are dense [`qstate::DensityMatrix`] values. The [`mub`] module turns
//! them into classical distributions through mutually unbiased bases,
//! [`sampling`] draws finite data from those distributions, [`classical`]
//! holds the ℓ2 statistics, and [`testers`] composes everything into
//! Yes/No property tests. [`harness`] runs Monte Carlo experiments.

pub mod classical;
pub mod harness;
pub mod mub;
pub mod qstate;
pub mod sampling;
pub mod testers;

pub use qstate::{DensityMatrix, SystemLayout};
