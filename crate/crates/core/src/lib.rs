//! Uncertainty-aware imitation learning on a desk-scale driving sandbox.

pub mod collect;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod expert;
pub mod policy;
pub mod replay;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod teleop;
pub mod uncertainty;

pub use error::{Error, Result};
