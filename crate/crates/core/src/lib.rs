//! Simulation of soft clustered federated learning.
//!
//! Clients hold data drawn from a mixture of S source distributions. The
//! server keeps S cluster models ("centers"); each round clients estimate how
//! much of their data each center explains, the server samples clients per
//! cluster in proportion to those importance weights, selected clients solve
//! one proximal problem anchored at all centers, and the server averages the
//! results into new centers. IFCA and FedEM are included as baselines.

pub mod baselines;
pub mod config;
pub mod datagen;
pub mod error;
pub mod fedsoft;
pub mod metrics;
pub mod models;
pub mod proximal;
pub mod rng;
pub mod runner;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
pub use types::*;
