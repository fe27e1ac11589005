//! Vanilla targeted attacks: source-to-target label flipping, explicit
//! update boosting, and alternating-minimization stealthy model poisoning.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::{client_rng, epoch_batches, local_train, ClientUpdate, Role, TrainingConfig};
use crate::nn::{Mode, Model, OptimizerState, ParamVector, SoftLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LabelFlip,
    ExplicitBoost,
    StealthyAltMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub source: usize,
    pub target: usize,
    pub kind: AttackKind,
    /// Explicit malicious client ids. When empty, the experiment draws them
    /// from `malicious_fraction`.
    #[serde(default)]
    pub malicious_clients: Vec<usize>,
    #[serde(default)]
    pub malicious_fraction: Option<f64>,
    /// Update scaling; unset means `n / k` for `n` clients and `k` attackers.
    #[serde(default)]
    pub boost_factor: Option<f64>,
    #[serde(default = "one")]
    pub stealth_rho: f64,
    #[serde(default = "one")]
    pub stealth_benign_weight: f64,
    /// `(poison_steps, stealth_steps)` per minibatch.
    #[serde(default = "default_schedule")]
    pub altmin_schedule: (usize, usize),
    #[serde(default = "default_start")]
    pub attack_start_round: usize,
}

fn one() -> f64 {
    1.0
}
fn default_schedule() -> (usize, usize) {
    (1, 1)
}
fn default_start() -> usize {
    1
}

impl AttackConfig {
    pub fn new(source: usize, target: usize, kind: AttackKind, malicious_clients: Vec<usize>) -> Self {
        AttackConfig {
            source,
            target,
            kind,
            malicious_clients,
            malicious_fraction: None,
            boost_factor: None,
            stealth_rho: 1.0,
            stealth_benign_weight: 1.0,
            altmin_schedule: default_schedule(),
            attack_start_round: 1,
        }
    }

    /// Boost factor in effect for `n` clients.
    pub fn boost(&self, n: usize) -> f64 {
        self.boost_factor.unwrap_or_else(|| {
            let k = self.malicious_clients.len().max(1);
            n as f64 / k as f64
        })
    }

    pub fn is_active(&self, round: usize) -> bool {
        round >= self.attack_start_round
    }

    pub fn validate(&self, num_classes: usize, num_clients: usize) -> Result<()> {
        if self.source == self.target {
            return Err(Error::config("attack.target", "source and target classes must differ"));
        }
        if self.source >= num_classes || self.target >= num_classes {
            return Err(Error::config(
                "attack.source",
                format!("classes must be below {num_classes}"),
            ));
        }
        if self.malicious_clients.is_empty() && self.malicious_fraction.is_none() {
            return Err(Error::config(
                "attack.malicious_clients",
                "an active attack needs at least one malicious client",
            ));
        }
        if let Some(&c) = self.malicious_clients.iter().find(|&&c| c >= num_clients) {
            return Err(Error::config(
                "attack.malicious_clients",
                format!("client {c} does not exist ({num_clients} clients)"),
            ));
        }
        if let Some(f) = self.malicious_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("attack.malicious_fraction", "must be in (0, 1]"));
            }
        }
        if self.boost_factor.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::config("attack.boost_factor", "must be positive"));
        }
        if !(self.stealth_rho >= 0.0) || !(self.stealth_benign_weight >= 0.0) {
            return Err(Error::config(
                "attack.stealth_rho",
                "stealth weights must be non-negative",
            ));
        }
        if self.attack_start_round == 0 {
            return Err(Error::config("attack.attack_start_round", "rounds start at 1"));
        }
        Ok(())
    }
}

/// Relabels every sample whose hard label is `source` as `target`.
/// Returns the number of flipped samples.
pub fn flip_labels(shard: &mut Dataset, source: usize, target: usize) -> usize {
    let n_classes = shard.num_classes();
    let hits: Vec<usize> = (0..shard.len())
        .filter(|&i| shard.label(i).hard_class() == Some(source))
        .collect();
    for &i in &hits {
        shard
            .set_label(i, SoftLabel::hard(target, n_classes))
            .expect("hard label has the dataset's class count");
    }
    if hits.is_empty() {
        info!("label flip: shard has no class-{source} samples");
    }
    hits.len()
}

/// Reports `lambda * delta`; everything else is preserved.
pub fn explicit_boost_update(update: &ClientUpdate, lambda: f64) -> Result<ClientUpdate> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("boost factor must be positive, got {lambda}")));
    }
    Ok(ClientUpdate {
        delta: update.delta.scaled(lambda),
        ..update.clone()
    })
}

/// Indices whose training label is still the hard one-hot of the true class.
fn untouched_indices(shard: &Dataset) -> Vec<usize> {
    (0..shard.len())
        .filter(|&i| shard.label(i).hard_class() == Some(shard.target(i)))
        .collect()
}

/// Alternating-minimization stealthy poisoning.
///
/// For each minibatch the poison phase takes `poison_steps` optimizer steps on
/// the cross-entropy of the (flipped) minibatch and stretches the resulting
/// weight change by `lambda`. The stealth phase then takes `stealth_steps`
/// steps, each an optimizer step on `benign_weight` times the cross-entropy of
/// the minibatch's untouched samples followed by the closed-form proximal step
/// for `rho * ||delta - estimate||^2`. The estimate is the previous global
/// update (zero before one exists).
#[allow(clippy::too_many_arguments)]
pub fn stealthy_altmin_train(
    global: &Model,
    shard: &Dataset,
    cfg: &TrainingConfig,
    attack: &AttackConfig,
    lambda: f64,
    prev_estimate: Option<&ParamVector>,
    client_id: usize,
    round: usize,
) -> Result<ClientUpdate> {
    let untouched = untouched_indices(shard);
    if untouched.len() == shard.len() {
        warn!("client {client_id}: no poisoned samples; falling back to benign training");
        let mut u = local_train(global, shard, cfg, client_id, round)?;
        u.role = Role::Malicious;
        return Ok(u);
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("boost factor must be positive, got {lambda}")));
    }
    let w_global = global.params().clone();
    let estimate = match prev_estimate {
        Some(p) => {
            w_global.check_same_layout(p)?;
            p.clone()
        }
        None => w_global.zeros_like(),
    };
    let anchor = w_global.add(&estimate)?;
    let is_untouched = {
        let mut m = vec![false; shard.len()];
        for &i in &untouched {
            m[i] = true;
        }
        m
    };
    let (poison_steps, stealth_steps) = attack.altmin_schedule;
    let stealth_on = attack.stealth_rho > 0.0 || attack.stealth_benign_weight > 0.0;
    let prox = 2.0 * cfg.optimizer.learning_rate() * attack.stealth_rho;

    let mut model = global.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, model.params().len());
    let mut rng = client_rng(cfg, client_id, round);
    for _ in 0..cfg.local_epochs {
        for idx in epoch_batches(shard.len(), cfg.batch_size, &mut rng) {
            // with stealth on, the remainder is covered by the benign term
            let poison_idx: Vec<usize> = if stealth_on {
                idx.iter().copied().filter(|&i| !is_untouched[i]).collect()
            } else {
                idx.clone()
            };
            for _ in 0..poison_steps {
                if poison_idx.is_empty() {
                    break;
                }
                let before = model.params().clone();
                let (x, y) = shard.batch(&poison_idx);
                let g = model.loss_and_gradient(&x, &y, Mode::Train)?;
                opt.step(model.params_mut(), &g.grad)?;
                model.apply_stats(&g.stats);
                if lambda != 1.0 {
                    let step = model.params().sub(&before)?;
                    let mut boosted = before;
                    boosted.axpy(lambda, &step)?;
                    model.set_params(boosted)?;
                }
            }
            if !stealth_on {
                continue;
            }
            let clean: Vec<usize> = idx.iter().copied().filter(|&i| is_untouched[i]).collect();
            for _ in 0..stealth_steps {
                if attack.stealth_benign_weight > 0.0 && !clean.is_empty() {
                    let (x, y) = shard.batch(&clean);
                    let g = model.loss_and_gradient(&x, &y, Mode::Train)?;
                    let grad = g.grad.scaled(attack.stealth_benign_weight);
                    opt.step(model.params_mut(), &grad)?;
                    model.apply_stats(&g.stats);
                }
                if prox > 0.0 {
                    // argmin_w ||w - v||^2 / 2 + (prox / 2) ||w - anchor||^2
                    let mut w = model.params().scaled(1.0 / (1.0 + prox));
                    w.axpy(prox / (1.0 + prox), &anchor)?;
                    model.set_params(w)?;
                }
            }
        }
    }
    if !model.params().values().iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged(format!(
            "stealthy training of client {client_id} produced non-finite weights"
        )));
    }
    Ok(ClientUpdate {
        client_id,
        delta: model.params().sub(&w_global)?,
        num_samples: shard.len(),
        role: Role::Malicious,
    })
}
