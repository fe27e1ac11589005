use log::info;
use rand::seq::index;

use crate::attacks::{flip_labels, AttackConfig};
use crate::boost::{run_botpa, BotpaArtifacts};
use crate::data::{partition::partition, Dataset};
use crate::error::{Error, Result};
use crate::fl::{run_experiment, Client, Role, Simulation, TrainingConfig};
use crate::metrics::{ri_asr, windowed_mean, RecordField, RoundRecord};
use crate::nn::Model;
use crate::par::{self, ExecMode};
use crate::seed::{self, stream};

use super::config::{fraction_count, ExperimentConfig};

/// Seed of repetition `run` (0-based).
pub fn repetition_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

/// Malicious client ids: the configured list, or a seeded draw of
/// `round(fraction * n)` clients.
pub fn malicious_set(attack: &AttackConfig, n: usize, seed_value: u64) -> Vec<usize> {
    if !attack.malicious_clients.is_empty() {
        return attack.malicious_clients.clone();
    }
    let k = fraction_count(attack.malicious_fraction.unwrap_or(0.0), n);
    let mut rng = seed::rng(seed_value, &[stream::MALICIOUS]);
    let mut ids = index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Everything shared by the vanilla and boosted arms of one repetition.
#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub init: Model,
    pub shards: Vec<Dataset>,
    pub malicious: Vec<usize>,
    pub training: TrainingConfig,
    pub exec: ExecMode,
}

impl World {
    pub fn build(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, run: usize, exec: ExecMode) -> Result<World> {
        let seed_value = repetition_seed(cfg.seed, run);
        let arch = cfg.model.build(train.sample_shape(), train.num_classes())?;
        let init = Model::init(arch, seed_value);
        let part = partition(train, cfg.partition.scheme()?, cfg.partition.clients, seed_value)?;
        let shards = part.shards.iter().map(|idx| train.subset(idx)).collect();
        let malicious = cfg
            .attack
            .as_ref()
            .map(|a| malicious_set(a, cfg.partition.clients, seed_value))
            .unwrap_or_default();
        let mut training = cfg.training.clone();
        training.seed = seed_value;
        training.exec = exec;
        Ok(World {
            seed: seed_value,
            train: train.clone(),
            test: test.clone(),
            init,
            shards,
            malicious,
            training,
            exec,
        })
    }

    /// Malicious shards with the source class flipped to the target.
    pub fn flipped_malicious_shards(&self, attack: &AttackConfig) -> Vec<Dataset> {
        self.malicious
            .iter()
            .map(|&c| {
                let mut s = self.shards[c].clone();
                let n = flip_labels(&mut s, attack.source, attack.target);
                info!("client {c}: {n} labels flipped");
                s
            })
            .collect()
    }

    /// Builds clients, substituting the given poisoned shards for the malicious ones.
    pub fn clients(&self, poisoned: &[Dataset]) -> Vec<Client> {
        self.shards
            .iter()
            .enumerate()
            .map(|(id, shard)| match self.malicious.iter().position(|&m| m == id) {
                Some(p) if !poisoned.is_empty() => Client {
                    id,
                    data: poisoned[p].clone(),
                    role: Role::Malicious,
                    clean: Some(shard.clone()),
                },
                _ => Client::benign(id, shard.clone()),
            })
            .collect()
    }

    pub fn simulate(&self, cfg: &ExperimentConfig, poisoned: &[Dataset]) -> Result<(Vec<RoundRecord>, Model)> {
        let mut sim = Simulation::new(
            self.init.clone(),
            self.clients(poisoned),
            self.test.clone(),
            self.training.clone(),
            cfg.aggregator.clone(),
            cfg.attack.clone(),
        )?;
        let records = run_experiment(&mut sim).map_err(|f| f.error)?;
        Ok((records, sim.global().clone()))
    }
}

/// Window-averaged results of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub records: Vec<RoundRecord>,
    pub final_model: Model,
    pub asr: Option<f64>,
    pub accuracy: f64,
    /// Fraction of attack rounds in which a selective aggregator admitted at
    /// least one malicious update; `None` for non-selective rules.
    pub malicious_selected: Option<f64>,
}

/// One repetition of a paired run.
#[derive(Debug, Clone)]
pub struct Repetition {
    pub run: usize,
    pub seed: u64,
    pub malicious: Vec<usize>,
    pub vanilla: ArmResult,
    pub boosted: Option<ArmResult>,
    pub botpa: Option<BotpaArtifacts>,
}

impl Repetition {
    pub fn ri_asr(&self) -> Option<f64> {
        let v = self.vanilla.asr?;
        let b = self.boosted.as_ref()?.asr?;
        ri_asr(v, b)
    }
}

fn arm(cfg: &ExperimentConfig, records: Vec<RoundRecord>, final_model: Model, malicious: &[usize]) -> Result<ArmResult> {
    let w = cfg.window();
    let asr = if cfg.attack.is_some() {
        Some(windowed_mean(&records, w.from_round, w.to_round, RecordField::Asr)?)
    } else {
        None
    };
    let accuracy = windowed_mean(&records, w.from_round, w.to_round, RecordField::GlobalAccuracy)?;
    let start = cfg.attack.as_ref().map_or(1, |a| a.attack_start_round);
    let attack_rounds: Vec<&RoundRecord> = records.iter().filter(|r| r.round >= start).collect();
    let malicious_selected = if malicious.is_empty() || attack_rounds.is_empty() {
        None
    } else {
        attack_rounds
            .iter()
            .map(|r| {
                r.selected_update_indices
                    .as_ref()
                    .map(|sel| sel.iter().any(|c| malicious.contains(c)))
            })
            .collect::<Option<Vec<bool>>>()
            .map(|hits| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    };
    Ok(ArmResult {
        records,
        final_model,
        asr,
        accuracy,
        malicious_selected,
    })
}

fn label(err: Error, what: &str, run: usize) -> Error {
    Error::InvalidArgument(format!("{what} arm of run {run}: {err}"))
}

/// Runs repetition `run`: the vanilla arm, and the boosted arm when a
/// `[botpa]` section is present. Both arms share the seed, partition,
/// initial model, and malicious set.
pub fn run_repetition(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, run: usize, exec: ExecMode) -> Result<Repetition> {
    let world = World::build(cfg, train, test, run, exec)?;
    let poisoned = cfg
        .attack
        .as_ref()
        .map(|a| world.flipped_malicious_shards(a))
        .unwrap_or_default();
    let (records, model) = world.simulate(cfg, &poisoned).map_err(|e| label(e, "vanilla", run))?;
    let vanilla = arm(cfg, records, model, &world.malicious)?;

    let (boosted, botpa) = match (&cfg.botpa, &cfg.attack) {
        (Some(b), Some(a)) => {
            let mut shards = poisoned.clone();
            let artifacts = run_botpa(
                &mut shards,
                &world.init,
                b,
                a.source,
                a.target,
                world.training.optimizer,
                world.training.batch_size,
                world.seed,
                exec,
            )
            .map_err(|e| label(e, "boosting stage", run))?;
            let (records, model) = world.simulate(cfg, &shards).map_err(|e| label(e, "boosted", run))?;
            (Some(arm(cfg, records, model, &world.malicious)?), Some(artifacts))
        }
        _ => (None, None),
    };
    Ok(Repetition {
        run,
        seed: world.seed,
        malicious: world.malicious,
        vanilla,
        boosted,
        botpa,
    })
}

/// Median of the defined values.
pub fn median_of(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    Some(crate::aggregators::median(&mut v))
}

/// All repetitions of a paired experiment plus medians across them.
#[derive(Debug, Clone)]
pub struct PairedSummary {
    pub repetitions: Vec<Repetition>,
}

impl PairedSummary {
    pub fn median_v_asr(&self) -> Option<f64> {
        median_of(self.repetitions.iter().map(|r| r.vanilla.asr))
    }

    pub fn median_b_asr(&self) -> Option<f64> {
        median_of(self.repetitions.iter().map(|r| r.boosted.as_ref().and_then(|b| b.asr)))
    }

    pub fn median_ri_asr(&self) -> Option<f64> {
        median_of(self.repetitions.iter().map(Repetition::ri_asr))
    }

    pub fn median_v_accuracy(&self) -> Option<f64> {
        median_of(self.repetitions.iter().map(|r| Some(r.vanilla.accuracy)))
    }

    pub fn median_b_accuracy(&self) -> Option<f64> {
        median_of(self.repetitions.iter().map(|r| r.boosted.as_ref().map(|b| b.accuracy)))
    }
}

/// Runs every repetition (concurrently unless serial) without writing files.
pub fn execute_paired(cfg: &ExperimentConfig) -> Result<PairedSummary> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    let exec = cfg.exec;
    let repetitions = par::try_map_range(exec, cfg.runs, |run| run_repetition(cfg, &train, &test, run, exec))?;
    Ok(PairedSummary { repetitions })
}
