//! Simulated soft-finger perception.
//!
//! * [`sim`]: rigid-link physics of a passive finger on a cylindrical arm.
//! * [`render`]: software rasterizer for the exocentric camera.
//! * [`dataset`]: episode execution, recording and the `SSD1` file format.
//! * [`nn`]: small reverse-mode tensor library, layers, losses and Adam.
//! * [`models`]: conditional VAE fusion/prediction models and reconstruction probes.
//! * [`metrics`]: SMAPE, WMAPE, R2, force statistics and latent-size sweeps.

pub mod cli;
pub mod config;
pub mod sim;
pub mod render;
pub mod dataset;
pub mod nn;
pub mod models;
pub mod metrics;
