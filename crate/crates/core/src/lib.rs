//! Haar-wavelet quasi-periodic potentials and finite-volume localization
//! certificates for lattice Schrödinger operators.

pub mod eigenstate;
pub mod error;
pub mod harness;
pub mod hull;
pub mod lattice;
pub mod logmag;
pub mod msa;
pub mod schedule;
pub mod torus;

pub use error::{Error, Result};
pub use logmag::LogMagnitude;
