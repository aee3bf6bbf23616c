//! Simulation and large-deviation tooling for the superprocess SPDEs
//! `u_t = F + √ε ∫∫ G(a, y, u) W(ds da) + ∫ ½Δu ds`.

pub mod control;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod metrics;
pub mod models;
pub mod noise;
pub mod optimize;
pub mod particles;
pub mod rate;
pub mod solver;

pub use error::{Error, Result};
