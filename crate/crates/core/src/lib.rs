//! Simulation and learning core for IRS-assisted NOMA visible-light networks.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod drl;
pub mod env;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod noma;
pub mod power;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
