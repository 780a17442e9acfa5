//! Multi-site feature harmonization with ComBat, Cluster ComBat and their
//! distributed variants.
//!
//! The centralized pipelines live in [`combat`] and [`cluster`]; the
//! coordinator/site protocol in [`federated`]. [`synth`] generates datasets
//! with known cluster effects and [`eval`] holds the metrics and experiment
//! harnesses built on them.

pub mod cluster;
pub mod combat;
pub mod data;
pub mod error;
pub mod eval;
pub mod federated;
pub mod model_io;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
