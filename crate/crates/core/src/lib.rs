//! Federated WiFi-fingerprint localization simulator.
//!
//! The crate simulates, in a single process, the federated training of
//! fingerprint positioning models on UJIIndoorLoc-format corpora:
//!
//! - [`dataset`]: corpus ingest, feature/target normalization, non-iid client
//!   partitions and source/target domain scenarios.
//! - [`model`]: a small MLP with hand-written backpropagation and flat
//!   parameter vectors.
//! - [`fedavg`]: the broadcast / local-train / weighted-aggregate round loop.
//! - [`transfer`]: FedLoc, N-FedLoc and the two-stage H-FedTLoc pipeline.
//! - [`floor3d`]: federated floor classification (multi-class FedAvg and
//!   FedOVA) plus per-floor 2D regressors.
//! - [`experiment`]: config-driven experiment runner and result tables.
//! - [`synth`]: a seeded generator of UJIIndoorLoc-format corpora.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fedavg;
pub mod floor3d;
pub mod model;
pub mod seed;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
