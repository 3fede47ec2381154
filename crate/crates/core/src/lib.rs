//! Representation-bias-tolerant fairness repair.
//!
//! Each `(u, s)` subgroup distribution is learned by a Dirichlet-process
//! learner that stops once successive posteriors stop moving. The learned
//! partitions give quantized conditionals, which are coupled per `u` by a
//! one-dimensional optimal transport plan and used to map any labelled
//! datum to the Wasserstein midpoint of its group.

pub mod datamodel;
pub mod dirichlet;
pub mod error;
pub mod geometric;
pub mod ingest;
pub mod metrics;
pub mod rng;
pub mod simgen;
pub mod snapshot;
pub mod stopping;
pub mod transport;

pub use error::{Error, Result};
