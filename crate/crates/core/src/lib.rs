//! Numerical laboratory for vector Allen-Cahn systems.
//!
//! The crate builds (local) minimizers of the diffuse-interface energy on
//! rectangular grids, decomposes them in polar form `u = a + q nu`, runs the
//! comparison-map constructions behind the density estimates, measures the
//! density/scaling quantities, and carries the 1-D heteroclinic-connection
//! machinery used for cylindrical estimates.

pub mod connection1d;
pub mod density;
pub mod error;
pub mod grid;
pub mod linking;
pub mod minimizer;
pub mod polar;
pub mod potentials;
pub mod rng;

pub use error::{PhaseError, Result};
pub use grid::{Field, Grid, NodeTag, Region};
pub use potentials::{PotentialSpec, Q_MIN};
