//! Amplifier-set boosting: train a surrogate on the contaminated malicious
//! data, pick the intermediate classes whose gradient contributions most
//! resemble the source class, craft soft labels from logits similarity, and
//! relabel those classes' samples on the malicious shards.

mod similarity;
mod surrogate;

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, OptimizerSpec, SoftLabel};
use crate::par::ExecMode;
use crate::seed::{self, stream};

pub use similarity::{
    capped, contrib_vector, cs_contrib, cs_ftrs, is_contrib, is_contrib_with, is_ftrs, similarity_matrix,
    ClassSampling, ClassSimilarityMatrix, ContribGradient, SimilarityKind,
};
pub use surrogate::{checkpoint_epoch, train_surrogate, SurrogateTraining};

pub const DEFAULT_SAMPLE_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SurrogateArch {
    /// Same architecture as the federated model.
    #[default]
    Identical,
    /// A caller-supplied layer stack over the same input shape and classes.
    Custom { layers: Vec<LayerSpec> },
}

/// How intermediate classes are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplifierStrategy {
    /// Highest contribution-degree similarity to the source class.
    #[default]
    Similarity,
    /// Uniformly random classes other than source and target (ablation).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BotpaConfig {
    pub num_intermediate: usize,
    #[serde(default)]
    pub surrogate_arch: SurrogateArch,
    #[serde(default = "default_epochs")]
    pub surrogate_epochs: usize,
    /// Unset means `ceil(surrogate_epochs / 2)`.
    #[serde(default)]
    pub contrib_checkpoint_epoch: Option<usize>,
    /// Unset means the federated training optimizer.
    #[serde(default)]
    pub surrogate_optimizer: Option<OptimizerSpec>,
    #[serde(default)]
    pub surrogate_batch_size: Option<usize>,
    /// Samples per class used by the similarity scores; `None` means all.
    #[serde(default = "default_cap")]
    pub per_class_sample_cap: Option<usize>,
    #[serde(default)]
    pub contrib_gradient: ContribGradient,
    #[serde(default)]
    pub strategy: AmplifierStrategy,
    /// Unset means the repetition seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_epochs() -> usize {
    10
}
fn default_cap() -> Option<usize> {
    Some(DEFAULT_SAMPLE_CAP)
}

impl BotpaConfig {
    pub fn new(num_intermediate: usize) -> Self {
        BotpaConfig {
            num_intermediate,
            surrogate_arch: SurrogateArch::Identical,
            surrogate_epochs: default_epochs(),
            contrib_checkpoint_epoch: None,
            surrogate_optimizer: None,
            surrogate_batch_size: None,
            per_class_sample_cap: default_cap(),
            contrib_gradient: ContribGradient::default(),
            strategy: AmplifierStrategy::Similarity,
            seed: None,
        }
    }

    pub fn checkpoint(&self) -> usize {
        self.contrib_checkpoint_epoch
            .unwrap_or_else(|| checkpoint_epoch(self.surrogate_epochs))
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_intermediate == 0 {
            return Err(Error::config("botpa.num_intermediate", "must be >= 1"));
        }
        if num_classes < 3 || self.num_intermediate > num_classes - 2 {
            return Err(Error::config(
                "botpa.num_intermediate",
                format!(
                    "N = {} exceeds N_C - 2 = {}",
                    self.num_intermediate,
                    num_classes.saturating_sub(2)
                ),
            ));
        }
        if self.surrogate_epochs == 0 {
            return Err(Error::config("botpa.surrogate_epochs", "must be >= 1"));
        }
        let cp = self.checkpoint();
        if cp == 0 || cp > self.surrogate_epochs {
            return Err(Error::config(
                "botpa.contrib_checkpoint_epoch",
                format!("must be in 1..={}", self.surrogate_epochs),
            ));
        }
        if self.per_class_sample_cap == Some(0) {
            return Err(Error::config("botpa.per_class_sample_cap", "must be positive"));
        }
        if self.surrogate_batch_size == Some(0) {
            return Err(Error::config("botpa.surrogate_batch_size", "must be positive"));
        }
        if let Some(o) = &self.surrogate_optimizer {
            o.validate()?;
        }
        Ok(())
    }
}

/// Selected intermediate classes, their samples on each malicious shard, and
/// the labels those samples receive.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplifierSet {
    pub classes: Vec<usize>,
    /// Per malicious shard, indices of samples whose true class is selected.
    pub sample_indices: Vec<Vec<usize>>,
    pub crafted_labels: BTreeMap<usize, SoftLabel>,
    /// Feature similarity of each selected class to the source.
    pub ftrs_scores: BTreeMap<usize, f64>,
}

/// Outcome of relabeling the malicious shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationReport {
    /// Samples assigned a crafted label, per shard.
    pub relabeled: Vec<usize>,
    /// Of those, samples whose label actually changed.
    pub changed: usize,
}

impl MutationReport {
    pub fn total(&self) -> usize {
        self.relabeled.iter().sum()
    }
}

/// Everything the boosting stage produced, for persistence and analysis.
#[derive(Debug, Clone)]
pub struct BotpaArtifacts {
    pub contrib: ClassSimilarityMatrix,
    pub ftrs: ClassSimilarityMatrix,
    pub amplifier: AmplifierSet,
    pub report: MutationReport,
    pub surrogate_accuracy: f64,
}

/// Soft label for an intermediate class `c_z` from its feature similarity to
/// the source: hard `e_z` when `cs <= 0`, else `cs e_tgt + (1 - cs) e_z`.
pub fn craft_soft_label(cs: f64, c_z: usize, c_tgt: usize, num_classes: usize) -> Result<SoftLabel> {
    if c_z == c_tgt {
        return Err(Error::invalid("intermediate class equals the target"));
    }
    if c_z >= num_classes || c_tgt >= num_classes {
        return Err(Error::invalid("class id out of range"));
    }
    if !(-1.0..=1.0).contains(&cs) {
        return Err(Error::invalid(format!("similarity {cs} outside [-1, 1]")));
    }
    if cs <= 0.0 {
        return Ok(SoftLabel::hard(c_z, num_classes));
    }
    let mut probs = vec![0.0; num_classes];
    probs[c_tgt] = cs;
    probs[c_z] = 1.0 - cs;
    SoftLabel::new(probs)
}

/// Top-`n` classes by contribution similarity to `source`, excluding source
/// and target. Ties go to the lower class id; classes with no samples rank last.
pub fn rank_intermediate(contrib: &ClassSimilarityMatrix, source: usize, target: usize) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..contrib.num_classes())
        .filter(|&c| c != source && c != target)
        .collect();
    let key = |c: usize| {
        let s = contrib.get(source, c);
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    cands.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    cands
}

/// Computes the contribution matrix on `model_mid` and returns the `n`
/// selected classes with the matrix.
pub fn select_intermediate_classes(
    model_mid: &Model,
    data: &Dataset,
    source: usize,
    target: usize,
    n: usize,
    sampling: &ClassSampling,
    route: ContribGradient,
) -> Result<(Vec<usize>, ClassSimilarityMatrix)> {
    let k = data.num_classes();
    if k < 3 {
        return Err(Error::invalid(format!("need at least 3 classes, got {k}")));
    }
    if n == 0 || n > k - 2 {
        return Err(Error::invalid(format!("N = {n} outside 1..={}", k - 2)));
    }
    let contrib = similarity_matrix(SimilarityKind::Contrib, model_mid, data, sampling, route, 0)?;
    let chosen: Vec<usize> = rank_intermediate(&contrib, source, target).into_iter().take(n).collect();
    let positive = chosen.iter().filter(|&&c| contrib.get(source, c) > 0.0).count();
    if positive < n {
        info!("only {positive} of {n} selected intermediate classes have positive contribution similarity");
    }
    Ok((chosen, contrib))
}

fn random_classes(k: usize, source: usize, target: usize, n: usize, seed_value: u64) -> Vec<usize> {
    let cands: Vec<usize> = (0..k).filter(|&c| c != source && c != target).collect();
    let mut rng = seed::rng(seed_value, &[stream::SURROGATE, 99]);
    let mut pick: Vec<usize> = index::sample(&mut rng, cands.len(), n)
        .into_iter()
        .map(|i| cands[i])
        .collect();
    pick.sort_unstable();
    pick
}

/// Builds the Amplifier set for the given shards and class choice.
pub fn build_amplifier(
    shards: &[&Dataset],
    classes: &[usize],
    ftrs: &ClassSimilarityMatrix,
    source: usize,
    target: usize,
) -> Result<AmplifierSet> {
    let k = ftrs.num_classes();
    let mut crafted_labels = BTreeMap::new();
    let mut ftrs_scores = BTreeMap::new();
    for &c in classes {
        if c == source || c == target {
            return Err(Error::invalid(format!("class {c} is the source or target")));
        }
        let cs = ftrs.get(source, c);
        let cs = if cs.is_nan() { 0.0 } else { cs };
        crafted_labels.insert(c, craft_soft_label(cs, c, target, k)?);
        ftrs_scores.insert(c, cs);
    }
    let sample_indices = shards
        .iter()
        .map(|s| {
            (0..s.len())
                .filter(|&i| crafted_labels.contains_key(&s.target(i)))
                .collect()
        })
        .collect();
    Ok(AmplifierSet {
        classes: classes.to_vec(),
        sample_indices,
        crafted_labels,
        ftrs_scores,
    })
}

/// Writes the crafted labels onto the Amplifier samples of each shard.
pub fn apply_botpa(shards: &mut [Dataset], amplifier: &AmplifierSet) -> Result<MutationReport> {
    if shards.len() != amplifier.sample_indices.len() {
        return Err(Error::Length(format!(
            "{} shards but amplifier describes {}",
            shards.len(),
            amplifier.sample_indices.len()
        )));
    }
    let mut relabeled = Vec::with_capacity(shards.len());
    let mut changed = 0;
    for (shard, idx) in shards.iter_mut().zip(&amplifier.sample_indices) {
        for &i in idx {
            let label = &amplifier.crafted_labels[&shard.target(i)];
            if shard.label(i) != label {
                changed += 1;
            }
            shard.set_label(i, label.clone())?;
        }
        relabeled.push(idx.len());
    }
    Ok(MutationReport { relabeled, changed })
}

/// Runs the whole boosting stage on already label-flipped malicious shards,
/// relabeling them in place.
#[allow(clippy::too_many_arguments)]
pub fn run_botpa(
    shards: &mut [Dataset],
    fl_model: &Model,
    cfg: &BotpaConfig,
    source: usize,
    target: usize,
    default_optimizer: OptimizerSpec,
    default_batch_size: usize,
    seed_value: u64,
    exec: ExecMode,
) -> Result<BotpaArtifacts> {
    let k = fl_model.num_classes();
    cfg.validate(k)?;
    if shards.is_empty() {
        return Err(Error::invalid("boosting needs at least one malicious shard"));
    }
    let seed_value = cfg.seed.unwrap_or(seed_value);
    let parts: Vec<&Dataset> = shards.iter().collect();
    let pooled = Dataset::concat(&parts)?;
    let training = SurrogateTraining {
        epochs: cfg.surrogate_epochs,
        checkpoint: cfg.checkpoint(),
        optimizer: cfg.surrogate_optimizer.unwrap_or(default_optimizer),
        batch_size: cfg.surrogate_batch_size.unwrap_or(default_batch_size),
        seed: seed_value,
    };
    let arch = match &cfg.surrogate_arch {
        SurrogateArch::Identical => fl_model.arch().clone(),
        SurrogateArch::Custom { layers } => {
            let a = crate::nn::Architecture::new(fl_model.arch().input_shape(), layers)?;
            if a.num_classes() != k {
                return Err(Error::config(
                    "botpa.surrogate_arch",
                    format!("custom surrogate has {} outputs, task has {k}", a.num_classes()),
                ));
            }
            a
        }
    };
    let (mid, conv) = train_surrogate(arch, &pooled, &training)?;
    let sampling = ClassSampling {
        cap: cfg.per_class_sample_cap,
        seed: seed_value,
        exec,
    };
    let (similar, mut contrib) = select_intermediate_classes(
        &mid,
        &pooled,
        source,
        target,
        cfg.num_intermediate,
        &sampling,
        cfg.contrib_gradient,
    )?;
    contrib.checkpoint = training.checkpoint;
    let classes = match cfg.strategy {
        AmplifierStrategy::Similarity => similar,
        AmplifierStrategy::Random => random_classes(k, source, target, cfg.num_intermediate, seed_value),
    };
    let ftrs = ClassSimilarityMatrix {
        checkpoint: training.epochs,
        ..similarity_matrix(SimilarityKind::Ftrs, &conv, &pooled, &sampling, cfg.contrib_gradient, 0)?
    };
    let amplifier = build_amplifier(&parts, &classes, &ftrs, source, target)?;
    let report = apply_botpa(shards, &amplifier)?;
    let surrogate_accuracy = crate::metrics::evaluate(&conv, &pooled, None, exec)?.accuracy;
    info!(
        "amplifier classes {:?}, {} samples relabeled ({} changed)",
        amplifier.classes,
        report.total(),
        report.changed
    );
    Ok(BotpaArtifacts {
        contrib,
        ftrs,
        amplifier,
        report,
        surrogate_accuracy,
    })
}

/// The `N` preceding the first non-increase of a metric over `N = first, first + 1, ...`.
/// A flat step counts as a decline, so a constant sequence picks `first`.
pub fn select_n(values: &[f64], first: usize) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    for i in 1..values.len() {
        if values[i].is_nan() || values[i] <= values[i - 1] {
            return Some(first + i - 1);
        }
    }
    Some(first + values.len() - 1)
}

/// Evaluates `runner(N)` for increasing `N` and stops at the first decline.
/// Returns the chosen `N` and the metric values seen.
pub fn select_n_sweep<F>(range: std::ops::RangeInclusive<usize>, mut runner: F) -> Result<(usize, Vec<f64>)>
where
    F: FnMut(usize) -> Result<f64>,
{
    let first = *range.start();
    let mut seen = Vec::new();
    for n in range {
        let v = runner(n)?;
        if v.is_nan() {
            warn!("N = {n}: metric undefined, treated as a decline");
        }
        seen.push(v);
        if seen.len() >= 2 {
            let m = seen.len();
            if seen[m - 1].is_nan() || seen[m - 1] <= seen[m - 2] {
                break;
            }
        }
    }
    let n = select_n(&seen, first).ok_or_else(|| Error::invalid("empty N range"))?;
    Ok((n, seen))
}
