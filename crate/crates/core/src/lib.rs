//! Deep state-space models for nonlinear system identification.
//!
//! The crate bundles a small reverse-mode autodiff engine, the network layers
//! and distribution heads built on it, six recurrent latent-variable model
//! variants trained by maximizing the sequential evidence lower bound, the
//! training loop, benchmark simulators and the open-loop evaluation metrics.

pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod train;

pub use autodiff::{AutodiffError, Tape, Tensor, Var};
