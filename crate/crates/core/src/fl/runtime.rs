use log::debug;
use thiserror::Error;

use crate::aggregators::{aggregate, AggregatorSpec};
use crate::attacks::{explicit_boost_update, stealthy_altmin_train, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::{local_train, Client, ClientUpdate, Role, TrainingConfig};
use crate::metrics::{evaluate, RoundRecord};
use crate::nn::{Model, ParamVector};
use crate::par;
use crate::seed::{self, stream};

/// Server state plus the client population of one experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    global: Model,
    clients: Vec<Client>,
    test: Dataset,
    training: TrainingConfig,
    aggregator: AggregatorSpec,
    attack: Option<AttackConfig>,
    prev_update: Option<ParamVector>,
    round: usize,
}

impl Simulation {
    /// Unset Krum-family `f_byzantine` defaults to the number of malicious clients.
    pub fn new(
        global: Model,
        clients: Vec<Client>,
        test: Dataset,
        training: TrainingConfig,
        mut aggregator: AggregatorSpec,
        attack: Option<AttackConfig>,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("simulation needs at least one client"));
        }
        training.validate()?;
        if aggregator.f_byzantine.is_none() {
            let k = clients.iter().filter(|c| c.role == Role::Malicious).count();
            aggregator.f_byzantine = Some(k);
        }
        aggregator.validate(clients.len())?;
        Ok(Simulation {
            global,
            clients,
            test,
            training,
            aggregator,
            attack,
            prev_update: None,
            round: 0,
        })
    }

    pub fn global(&self) -> &Model {
        &self.global
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn aggregator(&self) -> &AggregatorSpec {
        &self.aggregator
    }

    /// Number of completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    /// The most recent global update, if any round has completed.
    pub fn prev_update(&self) -> Option<&ParamVector> {
        self.prev_update.as_ref()
    }

    fn attack_for(&self, client: &Client, round: usize) -> Option<&AttackConfig> {
        self.attack
            .as_ref()
            .filter(|a| client.role == Role::Malicious && a.is_active(round))
    }

    /// The update one client reports in `round`.
    pub fn client_update(&self, client: &Client, round: usize) -> Result<ClientUpdate> {
        let cfg = &self.training;
        let Some(attack) = self.attack_for(client, round) else {
            let shard = client.clean.as_ref().unwrap_or(&client.data);
            let mut u = local_train(&self.global, shard, cfg, client.id, round)?;
            u.role = client.role;
            return Ok(u);
        };
        let lambda = attack.boost(self.clients.len());
        let mut u = match attack.kind {
            AttackKind::LabelFlip => local_train(&self.global, &client.data, cfg, client.id, round)?,
            AttackKind::ExplicitBoost => explicit_boost_update(
                &local_train(&self.global, &client.data, cfg, client.id, round)?,
                lambda,
            )?,
            AttackKind::StealthyAltMin => stealthy_altmin_train(
                &self.global,
                &client.data,
                cfg,
                attack,
                lambda,
                self.prev_update.as_ref(),
                client.id,
                round,
            )?,
        };
        u.role = Role::Malicious;
        Ok(u)
    }

    /// Local training on every client, in client order.
    pub fn collect_updates(&self, round: usize) -> Result<Vec<ClientUpdate>> {
        par::try_map_range(self.training.exec, self.clients.len(), |i| {
            self.client_update(&self.clients[i], round)
        })
    }

    /// Broadcast, local training, aggregation, and evaluation for the next round.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.round + 1;
        self.step(round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })
    }

    fn step(&mut self, round: usize) -> Result<RoundRecord> {
        let updates = self.collect_updates(round)?;
        let noise_seed = seed::derive(self.training.seed, &[stream::FLAME, round as u64]);
        let agg = aggregate(&self.aggregator, &updates, noise_seed, self.training.exec)?;
        let next = self.global.params().add(&agg.delta)?;
        if !next.values().iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged("global weights became non-finite".into()));
        }
        self.global.set_params(next)?;
        self.prev_update = Some(agg.delta);
        self.round = round;
        let attack = self.attack.as_ref().map(|a| (a.source, a.target));
        let eval = evaluate(&self.global, &self.test, attack, self.training.exec)?;
        debug!(
            "round {round}: accuracy {:.4}, asr {:?}",
            eval.accuracy, eval.asr
        );
        Ok(RoundRecord {
            round,
            global_accuracy: eval.accuracy,
            per_class_accuracy: eval.per_class_accuracy,
            asr: eval.asr,
            selected_update_indices: agg.selected,
            aggregator: self.aggregator.summary(),
        })
    }
}

/// A failed experiment together with the rounds completed before the failure.
#[derive(Debug, Error)]
#[error("{error} (after {} completed rounds)", records.len())]
pub struct ExperimentFailure {
    pub records: Vec<RoundRecord>,
    #[source]
    pub error: Error,
}

/// Runs `training.rounds` rounds.
pub fn run_experiment(sim: &mut Simulation) -> std::result::Result<Vec<RoundRecord>, ExperimentFailure> {
    let mut records = Vec::with_capacity(sim.training.rounds);
    for _ in 0..sim.training.rounds {
        match sim.run_round() {
            Ok(r) => records.push(r),
            Err(error) => return Err(ExperimentFailure { records, error }),
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::AggregatorKind;
    use crate::data::synth_blobs;
    use crate::nn::{Architecture, OptimizerSpec};
    use crate::par::ExecMode;

    fn sim(shards: Vec<Dataset>, agg: AggregatorSpec) -> Simulation {
        let test = synth_blobs(3, 5, 4, 0.5, 1).unwrap();
        let model = Model::init(Architecture::mlp(4, &[6], 3).unwrap(), 2);
        let mut cfg = TrainingConfig::new(2, OptimizerSpec::sgd(0.1), 5);
        cfg.local_epochs = 1;
        cfg.batch_size = 8;
        cfg.exec = ExecMode::Serial;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(i, d)| Client::benign(i, d))
            .collect();
        Simulation::new(model, clients, test, cfg, agg, None).unwrap()
    }

    #[test]
    fn weighted_round_matches_hand_mean() {
        let ds = synth_blobs(3, 4, 4, 0.5, 9).unwrap();
        let shards = vec![ds.subset(&[0]), ds.subset(&[5]), ds.subset(&[9, 11])];
        let mut s = sim(shards, AggregatorSpec::fed_avg());
        let before = s.global().params().clone();
        let u = s.collect_updates(1).unwrap();
        s.run_round().unwrap();
        let got = s.global().params().sub(&before).unwrap();
        for j in 0..got.len() {
            let want = (u[0].delta.values()[j] + u[1].delta.values()[j] + 2.0 * u[2].delta.values()[j]) / 4.0;
            assert!((got.values()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_passes_through_krum() {
        let ds = synth_blobs(3, 4, 4, 0.5, 9).unwrap();
        let mut s = sim(vec![ds], AggregatorSpec::new(AggregatorKind::Krum));
        let u = s.collect_updates(1).unwrap();
        let before = s.global().params().clone();
        let rec = s.run_round().unwrap();
        assert_eq!(s.global().params().sub(&before).unwrap(), u[0].delta);
        assert_eq!(rec.selected_update_indices, Some(vec![0]));
    }

    #[test]
    fn runs_and_is_deterministic() {
        let ds = synth_blobs(3, 6, 4, 0.5, 9).unwrap();
        let halves = vec![ds.subset(&(0..9).collect::<Vec<_>>()), ds.subset(&(9..18).collect::<Vec<_>>())];
        let mut a = sim(halves.clone(), AggregatorSpec::fed_avg());
        let mut b = sim(halves, AggregatorSpec::fed_avg());
        let ra = run_experiment(&mut a).unwrap();
        let rb = run_experiment(&mut b).unwrap();
        assert_eq!(ra.len(), 2);
        assert_eq!(ra, rb);
        assert_eq!(ra[0].asr, None);
    }
}
