use std::sync::Arc;

use log::debug;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::{epoch_batches, train_step};
use crate::nn::{Architecture, Model, OptimizerSpec, OptimizerState};
use crate::seed::{self, stream};

/// Centralized training schedule for the attacker's surrogate model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTraining {
    pub epochs: usize,
    /// Epoch whose weights are kept as the mid-training checkpoint.
    pub checkpoint: usize,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub seed: u64,
}

/// Default mid-training checkpoint: `ceil(epochs / 2)`.
pub fn checkpoint_epoch(epochs: usize) -> usize {
    epochs.div_ceil(2)
}

/// Trains from scratch on the pooled contaminated data and returns the
/// checkpoint model and the final model.
pub fn train_surrogate(arch: Arc<Architecture>, data: &Dataset, cfg: &SurrogateTraining) -> Result<(Model, Model)> {
    if data.is_empty() {
        return Err(Error::invalid("surrogate training on an empty dataset"));
    }
    if cfg.epochs == 0 || cfg.checkpoint == 0 || cfg.checkpoint > cfg.epochs {
        return Err(Error::invalid(format!(
            "checkpoint epoch {} outside 1..={}",
            cfg.checkpoint, cfg.epochs
        )));
    }
    let mut model = Model::init(arch, seed::derive(cfg.seed, &[stream::SURROGATE, 0]));
    let mut opt = OptimizerState::new(cfg.optimizer, model.params().len());
    let mut rng = seed::rng(cfg.seed, &[stream::SURROGATE, 1]);
    let mut mid = None;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let loss = train_step(&mut model, &mut opt, data, &idx)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("surrogate loss is {loss} in epoch {epoch}")));
            }
            total += loss;
            batches += 1;
        }
        debug!("surrogate epoch {epoch}: mean loss {:.4}", total / batches as f64);
        if epoch == cfg.checkpoint {
            mid = Some(model.clone());
        }
    }
    Ok((mid.expect("checkpoint within epochs"), model))
}
