//! Domain-incremental learning through activation matching.
//!
//! A clear-condition classifier is adapted to new visual conditions by
//! training only the affine parameters of its normalization layers so that
//! per-element activation statistics match those recorded on clear data.
//! Each condition's affine parameters live in an [`adapt::AffineBank`]; at
//! inference a linear task identifier on block-1 features, smoothed by a
//! majority vote, picks the bank entry to plug in.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod seed;
pub mod stats;
pub mod taskid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
