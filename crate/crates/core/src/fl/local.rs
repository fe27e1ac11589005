use log::warn;
use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::Result;
use crate::fl::{ClientUpdate, TrainingConfig};
use crate::nn::{Mode, Model, OptimizerState};
use crate::seed::{self, stream, Rng};

/// Shuffled minibatch index lists covering `0..n` once.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One optimizer step on the given minibatch; batch-norm running statistics
/// are written back after the step.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    data: &Dataset,
    idx: &[usize],
) -> Result<f64> {
    let (x, y) = data.batch(idx);
    let g = model.loss_and_gradient(&x, &y, Mode::Train)?;
    opt.step(model.params_mut(), &g.grad)?;
    model.apply_stats(&g.stats);
    Ok(g.loss)
}

/// RNG stream owned by one client in one round.
pub fn client_rng(cfg: &TrainingConfig, client_id: usize, round: usize) -> Rng {
    seed::rng(cfg.seed, &[stream::CLIENT, client_id as u64, round as u64])
}

/// Local epochs of minibatch training from the global weights; reports the delta.
pub fn local_train(
    global: &Model,
    shard: &Dataset,
    cfg: &TrainingConfig,
    client_id: usize,
    round: usize,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        warn!("client {client_id} has an empty shard; sending a zero update");
        return Ok(ClientUpdate::new(
            client_id,
            global.params().zeros_like(),
            0,
        ));
    }
    let mut model = global.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, model.params().len());
    let mut rng = client_rng(cfg, client_id, round);
    for _ in 0..cfg.local_epochs {
        for idx in epoch_batches(shard.len(), cfg.batch_size, &mut rng) {
            train_step(&mut model, &mut opt, shard, &idx)?;
        }
    }
    Ok(ClientUpdate::new(
        client_id,
        model.params().sub(global.params())?,
        shard.len(),
    ))
}
