//! Prior-informed diffusion bridges for molecules and point clouds.
//!
//! Bridges pinned at data points carry a force from a prior energy; a drift
//! network is fit to them by score matching and then sampled with
//! Euler–Maruyama.

pub mod bridges;
pub mod cli;
pub mod config;
pub mod energies;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod quad;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
