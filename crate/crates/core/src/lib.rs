//! Desk-scale simulator for federated continual learning with a frozen
//! masked-autoencoder backbone.
//!
//! Clients jointly tune a discriminative prompt, a classifier head and a
//! reconstructive prompt on private task data. Each round the server
//! aggregates the tunable payload by sample-weighted averaging, rebuilds
//! images from uploaded restore information, and fine-tunes the
//! discriminative parameters on the reconstructions so accuracy survives
//! class-incremental drift and non-IID client data.

mod bytes;
pub mod checkpoint;
pub mod client;
pub mod data;
pub mod dump;
pub mod error;
pub mod harness;
pub mod loss;
pub mod masking;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod partition;
pub mod pretrain;
pub mod prompts;
pub mod rng;
pub mod server;
pub mod wire;

pub use error::{Error, Result};
