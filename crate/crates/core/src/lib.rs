//! Discrete-event simulation of pilot-based execution of many-task workloads
//! across several HPC sites.

pub mod bridge;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod pilot;
pub mod resource;
pub mod simulator;
pub mod strategy;
pub mod workload;

pub use error::{Error, Result};
