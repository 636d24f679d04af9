//! File codecs and run manifests.

pub mod formats;
pub mod manifest;
pub mod pgm;

pub use formats::{FormatError, Grid, Tensor};
