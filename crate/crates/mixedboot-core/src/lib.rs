//! Random-intercept linear mixed models with resampling-based inference.
//!
//! The model is `y_ij = x_ij'beta + u_i + e_ij` for unit `j` in cluster `i`,
//! with `u_i ~ (0, sigma2_u)` and `e_ij ~ (0, sigma2_e)`. This crate fits the
//! model by ML or REML under a Gaussian working likelihood ([`fit`]), builds
//! centered/rescaled residual pools ([`reflate`]), and runs a family of
//! cluster bootstraps behind one engine interface ([`engines`]), plus
//! percentile-interval inference ([`inference`]) and a simulation harness
//! ([`simlab`]).
//!
//! Everything is deterministic given a seed: replicate `b` of any bootstrap
//! consumes random stream `b` of the run's seed, so serial and parallel
//! execution produce identical output (see [`resample`]).
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std` feature
//! switches float transcendentals to the intrinsics.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod engines;
pub mod error;
pub mod fit;
pub mod inference;
pub(crate) mod math;
pub mod reflate;
pub mod resample;
pub mod simlab;

pub use data::{ClusteredDataset, Criterion, ThetaVector};
pub use error::{Error, Result};
pub use fit::{fit, FitOptions, FitResult};
