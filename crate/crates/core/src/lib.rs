//! Latent-space LLM routing.
//!
//! The crate calibrates a multidimensional 2PL item-response space from
//! model × prompt score matrices, selects small D-optimal anchor sets,
//! profiles new models against those anchors without retraining anything,
//! predicts latent coordinates for unseen query text, and assigns queries to
//! models under a weighted accuracy / cost / latency objective.
//!
//! Module map:
//!
//! * [`irt`]: probability model, calibration, zero-shot profiling
//! * [`anchors`]: Fisher information and greedy D-optimal selection
//! * [`estimators`]: cost, token, verbosity and latency estimators
//! * [`predictor`]: text → (α, b) network with manual backprop
//! * [`router`]: estimate matrix, separable and constrained assignment, reward
//! * [`registry`] / [`service`]: persistence, snapshots and the NDJSON server
//! * [`sim`]: synthetic worlds, sampling ablation, evolving pool simulation

pub mod anchors;
pub mod config;
pub mod error;
pub mod estimators;
pub mod instrument;
pub mod irt;
pub mod math;
pub mod predictor;
pub mod registry;
pub mod router;
pub mod service;
pub mod sim;

pub use error::{Error, Result};
