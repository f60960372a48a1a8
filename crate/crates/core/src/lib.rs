//! Federated-learning simulation with distribution-controlled (DC) client
//! selection.
//!
//! Each round a random base set of clients is drawn and then greedily
//! augmented with clients whose label counts move the combined label
//! distribution of the active set closest (in cosine distance) to a target:
//! either the federation-wide label counts, or a balanced vector. The
//! augmentation plugs into FedAvg, FedAtt and FedProx.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod labeldist;
pub mod model;
pub mod orchestrator;
pub mod partition;
pub mod seed;
pub mod selection;
pub mod strategies;

pub use error::{Error, ErrorCategory, Result};
