//! Reconstruction of the absorption coefficient in 2-D diffuse optical
//! tomography with an approximately globally convergent layer-stripping
//! method.

pub mod cli;
pub mod config;
pub mod error;
pub mod fem;
pub mod forward;
pub mod mesh;
pub mod pipeline;
pub mod preprocess;
pub mod scenes;
pub mod specfun;
pub mod stripping;
pub mod tail;

pub use error::{Error, ErrorKind, Result};

/// A point `(x, z)` in millimeters.
pub type Point = [f64; 2];
