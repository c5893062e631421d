//! Wafer-level spatial variation modeling for multi-site testing.
//!
//! The crate is `no_std` (with `alloc`) and contains only the numerical
//! machinery: wafer/touchdown geometry, RBF Gaussian-process regression,
//! the site-partitioned hierarchical GP, the k-means + GP baseline, active
//! touchdown selection, a synthetic wafer generator and the error metrics.
//! File formats, timing and the command-line front end live in the `sitegp`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
mod math;

pub mod active;
pub mod baselines;
pub mod gp;
pub mod hier;
pub mod linalg;
pub mod metrics;
pub mod synth;
pub mod wafer;

pub use error::{Error, Result};
pub use gp::{GpModel, GpOptions, KernelParams, PredictionResult};
pub use wafer::{DieCoord, Measurement, MeasurementSet, SiteId, Tiling, TouchdownLayout, WaferGeometry};
