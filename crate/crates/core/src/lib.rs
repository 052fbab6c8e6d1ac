//! Synthetic driving scenes with attackable planar surfaces, physical-style
//! adversarial patch optimization against small differentiable task models,
//! and defense/detector evaluation.

pub mod error;
pub mod annotate;
pub mod attack;
pub mod cli;
pub mod dataset;
pub mod defense;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod render;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
