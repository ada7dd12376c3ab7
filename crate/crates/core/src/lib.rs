//! Desk-scale satellite-to-irradiance forecasting toolkit.
//!
//! The pieces, bottom to top:
//!
//! - [`geogrid`]: regular lat/lon grids, timestamps, gridded fields, bilinear
//!   regridding, and the SSGF binary container.
//! - [`clearsky`]: solar geometry and the Ineichen-Perez clear-sky GHI model.
//! - [`tensor`]: a minimal reverse-mode autodiff tensor engine with a 2-D FFT,
//!   generic over `f32`/`f64`.
//! - [`model`]: the two-stage forecaster — a spectral-mixing transformer cloud
//!   block feeding a windowed-attention irradiance block.
//! - [`pipeline`]: synthetic data generation, normalization, training, and
//!   forecast production.
//! - [`evaluate`]: MAE/RMSE, first-order-difference metrics, spatial error and
//!   improvement maps, correlation analysis, station verification.
//! - [`cli`]: the `helioseer` command-line interface.

pub mod clearsky;
pub mod cli;
pub(crate) mod kvtext;
pub mod error;
pub mod evaluate;
pub mod geogrid;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
