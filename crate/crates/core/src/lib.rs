//! Federated-learning simulator for boosted targeted poisoning.
//!
//! The crate covers the whole pipeline: a small `f64` neural-network engine,
//! datasets and client partitioners, the round-based FL runtime, robust
//! aggregation rules, vanilla data/model poisoning attacks, the Amplifier-set
//! boosting stage with soft-label crafting, and the metrics used to compare
//! vanilla and boosted runs. Data-parallel inner loops go through [`par`],
//! which falls back to sequential iteration without the `parallel` feature.

pub mod aggregators;
pub mod attacks;
pub mod boost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod seed;

pub use error::{Error, Result};
pub use par::ExecMode;
