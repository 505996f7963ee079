//! Arbitrage-free spot and equity-option market simulator.
//!
//! The crate calibrates and runs a flow-based market simulator for one or
//! many underlyings:
//!
//! - [`dlv`]: bijective codec between call-price grids and discrete local
//!   volatilities, arbitrage checking and an arbitrage-free surface fitter;
//! - [`compression`]: autoencoder (and PCA baseline) over standard-scaled
//!   log local-vol grids, guaranteeing arbitrage-free reconstructions;
//! - [`flow`]: conditional autoregressive linear neural-spline flow with
//!   exact inverse, log-determinant and conditional log-density;
//! - [`simulator`]: the per-asset market map (martingale spot transform plus
//!   compressed-state flow), path sampling and latent extraction;
//! - [`copula`]: Gaussian-copula joint calibration of several simulators
//!   with identity diagonal blocks, plus an unconditional flow benchmark;
//! - [`evaluation`]: KS tests, ACF, cross-correlations, histogram/KDE
//!   comparisons and the stylized-facts report;
//! - [`synth`]: a synthetic stochastic-volatility market used for
//!   validation; [`cli_io`]: data ingestion, persistence and the pipeline.

pub mod autodiff;
pub mod cli_io;
pub mod compression;
pub mod copula;
pub mod dlv;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod nn;
pub mod simulator;
pub mod synth;

pub use error::{Result, VoltError};
