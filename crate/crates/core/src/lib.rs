//! Resource-aware clustering of heterogeneous federated-learning
//! participants, convergence-driven assignment to clusters, and
//! master-slave knowledge-distillation training in a deterministic
//! simulator.

pub mod assignment;
pub mod clustering;
pub mod config;
pub mod convergence;
pub mod data;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod report;
pub mod resources;
pub mod seed;

pub use error::{Error, Result};
