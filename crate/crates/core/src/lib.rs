//! Deterministic federated-learning simulation engine.
//!
//! Clients train a small MLP on non-IID shards of a dataset and a server
//! averages their models every round. Three local procedures are available:
//! FedAvg, FedProx and FedFA, which pulls class features toward shared
//! anchors and calibrates the classifier on those anchors.
//!
//! All randomness flows from one seed through [`numerics::derive_seed`], so a
//! configuration plus a seed fully determines every metric written to disk.

pub mod anchors;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod server;
pub mod strategies;
pub mod verify;

pub use anchors::{AnchorSet, MomentumState};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{ClientPartition, Dataset, FeatureSkewTransform};
pub use error::{Error, Result};
pub use metrics::RoundRecord;
pub use model::{Classifier, Extractor, GradientSet, Hyper, Layer, ModelParams};
pub use numerics::{Matrix, SimRng};
pub use server::{ExperimentState, RunOutput};
pub use strategies::{Calibration, FedFaSpec, LocalReport, Strategy};
