//! Deformable-attention forecasting for multivariable time series.
//!
//! The crate is organised as a pipeline: [`numerics`] provides a reverse-mode
//! autodiff tape over dense `f64` tensors, [`dataprep`] turns raw CSV series
//! into supervised look-back windows, [`model`] assembles the deformable
//! attention forecaster on top of the tape, [`training`] fits it with Adam,
//! and [`evaluation`] scores forecasts against baselines.

pub mod dataprep;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
