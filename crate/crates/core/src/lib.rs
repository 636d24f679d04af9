//! Simulation and analysis toolkit for 1-bit quanta image sensors.
//!
//! - [`sensor_model`]: Poisson/Gaussian/threshold image formation, bit density and its inverse
//! - [`bracketing`]: exposure-bracketed binary bursts with continuous exposure labels
//! - [`filter_atoms`]: atom-coefficient filters and the exposure-adaptive layer
//! - [`atom_ode`]: filter atoms evolved along the exposure label by an ODE
//! - [`theorem`]: numerical verification of the layer continuity bound
//! - [`calibration`]: CMOS and QIS camera conversions
//! - [`io`]: binary codecs, PGM export and run manifests

pub mod atom_ode;
pub mod bracketing;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod filter_atoms;
pub mod io;
pub mod rng;
pub mod sensor_model;
pub mod theorem;

pub use error::{Error, Result};
