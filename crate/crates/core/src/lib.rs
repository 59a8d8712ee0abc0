//! Federated-learning simulation core.
//!
//! A self-contained deterministic stack: tensors and a small CNN/MLP engine
//! (`nn`), multi-kernel MMD penalties (`mmd`), feature-fusion operators
//! (`fusion`), dataset loading and non-IID partitioning (`data`), and the
//! synchronous federated round loop (`federation`).

pub mod data;
pub mod error;
pub mod federation;
pub mod fusion;
pub mod mmd;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use federation::{
    aggregate_weighted, evaluate, run_federation, sample_clients, BatchSize, ClientUpdate,
    FederationConfig, FederationRun, LocalConfig, Penalty, PenaltyTarget, RoundMetrics, Strategy,
};
pub use fusion::{FusionOperator, FusionVariant};
pub use nn::{ArchPreset, ArchSpec, Model};
pub use tensor::Tensor;
