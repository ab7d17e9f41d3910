//! Simulation and inference toolkit for estimating surface charge densities on
//! optical fibers placed near a trapped ion.
//!
//! The pipeline mirrors a fiber-cavity ion-trap experiment:
//!
//! 1. [`solver`] computes unit-excitation basis potentials (rf pair, each
//!    endcap, each charged fiber surface) on a 3D grid and exports the z = 0
//!    plane as 2D [`maps::PotentialMap`]s.
//! 2. [`composer`] superposes the bases with applied voltages and charge
//!    densities into a total potential-energy landscape, including the rf
//!    pseudopotential and an optional stray patch potential.
//! 3. [`landscape`] extracts equilibrium positions, well classification and
//!    secular frequencies, and fits the axial frequency law used for endcap
//!    voltage calibration.
//! 4. [`patch`] reconstructs the stray potential along the trap axis from
//!    measurement/simulation discrepancies by two independent integrations.
//! 5. [`inference`] estimates facet/side charge densities by error-weighted
//!    least squares over fiber-retraction scans.
//! 6. [`synth`] is the forward model producing synthetic datasets for
//!    round-trip validation.

pub mod cache;
pub mod composer;
pub mod config;
pub mod consts;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod inference;
pub mod io;
pub mod landscape;
pub mod maps;
pub mod patch;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
