//! Simulation and reconstruction toolkit for donor-qubit single-molecule MRI.
//!
//! Pipeline: structure ([`molecule`]) → coupling field ([`probe`]) → slice signals
//! ([`signal`], [`scan`]) → voxel inversion ([`inversion`]) → peak analysis
//! ([`analysis`]). [`oracle`] simulates small clusters exactly to check the signal model.

pub mod analysis;
pub mod config;
pub mod error;
pub mod inversion;
pub mod io;
pub mod molecule;
pub mod oracle;
pub mod probe;
pub mod scan;
pub mod signal;

pub use error::{Error, ErrorKind, Result};
