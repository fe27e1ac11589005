//! Round-based federated training: local client training, update collection,
//! aggregation, and per-round metrics.

mod local;
mod runtime;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{OptimizerSpec, ParamVector};
use crate::par::ExecMode;

pub use local::{client_rng, epoch_batches, local_train, train_step};
pub use runtime::{run_experiment, ExperimentFailure, Simulation};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub exec: ExecMode,
}

fn default_local_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_optimizer() -> OptimizerSpec {
    OptimizerSpec::adam(1e-3)
}

impl TrainingConfig {
    pub fn new(rounds: usize, optimizer: OptimizerSpec, seed: u64) -> Self {
        TrainingConfig {
            rounds,
            local_epochs: default_local_epochs(),
            batch_size: default_batch_size(),
            optimizer,
            seed,
            exec: ExecMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("training.rounds", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("training.local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Benign,
    Malicious,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: ParamVector,
    pub num_samples: usize,
    pub role: Role,
}

impl ClientUpdate {
    pub fn new(client_id: usize, delta: ParamVector, num_samples: usize) -> Self {
        ClientUpdate {
            client_id,
            delta,
            num_samples,
            role: Role::Benign,
        }
    }
}

/// A participant with its (possibly poisoned) training shard.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub data: Dataset,
    pub role: Role,
    /// Unpoisoned copy for rounds before the attack starts.
    pub clean: Option<Dataset>,
}

impl Client {
    pub fn benign(id: usize, data: Dataset) -> Self {
        Client {
            id,
            data,
            role: Role::Benign,
            clean: None,
        }
    }
}
