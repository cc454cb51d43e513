//! Kronecker-factored gradient preconditioning over a simulated cluster.
//!
//! The crate trains small dense/convolutional classifiers with a natural
//! gradient method: per-layer curvature is approximated by a Kronecker
//! product of two small covariance factors, factor eigendecompositions are
//! refreshed on a configurable interval, and the per-layer work is spread
//! across simulated workers that communicate through counted collective
//! operations. The simulation is deterministic: the same seed and worker
//! count produce bitwise-identical results in threaded and lockstep modes.

pub mod cli;
pub mod dist;
pub mod error;
pub mod kfac;
pub mod linalg;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
