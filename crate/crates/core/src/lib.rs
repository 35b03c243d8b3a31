//! Simulation and estimation toolkit for observational causal inference
//! when confounding is carried by patterns in images.
//!
//! The pipeline generates synthetic scenes, derives a latent confounder
//! from each scene with a fixed kernel filter, draws treatments and
//! outcomes, fits convolutional propensity models, and evaluates inverse
//! propensity weighted estimates against the difference in means.

pub mod cli;
pub mod config;
pub mod confounder;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod manifest;
pub mod propensity;
pub mod raster;
pub mod rng;
pub mod salience;

pub use error::{Error, Result};
