use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregators::{AggregatorKind, AggregatorSpec};
use crate::attacks::AttackConfig;
use crate::boost::BotpaConfig;
use crate::data::{load_idx, BlobSpec, Dataset, Scheme};
use crate::error::{Error, Result};
use crate::fl::TrainingConfig;
use crate::nn::{Architecture, LayerSpec};
use crate::par::ExecMode;
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Random training subset size; unset keeps everything.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    /// Keep images as `[1, rows, cols]` for convolutional models instead of
    /// flattening them.
    #[serde(default)]
    pub keep_image_shape: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Idx(IdxSpec),
}

fn random_subset(ds: &Dataset, n: Option<usize>, seed_value: u64, tag: u64) -> Dataset {
    match n {
        Some(n) if n < ds.len() => {
            let mut rng = seed::rng(seed_value, &[stream::DATA, tag]);
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
            idx.sort_unstable();
            ds.subset(&idx)
        }
        _ => ds.clone(),
    }
}

impl DatasetSpec {
    /// Training and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Blobs(b) => b.generate_split(),
            DatasetSpec::Idx(s) => {
                let train = load_idx(&s.train_images, &s.train_labels, s.num_classes)?;
                let test = load_idx(&s.test_images, &s.test_labels, Some(train.num_classes()))?;
                let train = random_subset(&train, s.train_subset, s.seed, 10);
                let test = random_subset(&test, s.test_subset, s.seed, 11);
                let (r, c) = (train.sample_shape()[0], train.sample_shape()[1]);
                let shape: Vec<usize> = if s.keep_image_shape { vec![1, r, c] } else { vec![r * c] };
                Ok((train.with_sample_shape(&shape)?, test.with_sample_shape(&shape)?))
            }
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            DatasetSpec::Blobs(b) => Some(b.num_classes),
            DatasetSpec::Idx(s) => s.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub scheme: SchemeName,
    /// Dirichlet concentration; required for the dirichlet scheme.
    #[serde(default)]
    pub beta: Option<f64>,
}

impl PartitionConfig {
    pub fn scheme(&self) -> Result<Scheme> {
        match (self.scheme, self.beta) {
            (SchemeName::Iid, _) => Ok(Scheme::Iid),
            (SchemeName::Dirichlet, Some(beta)) if beta > 0.0 && beta.is_finite() => Ok(Scheme::Dirichlet { beta }),
            (SchemeName::Dirichlet, Some(_)) => Err(Error::config("partition.beta", "must be positive")),
            (SchemeName::Dirichlet, None) => Err(Error::config("partition.beta", "required for the dirichlet scheme")),
        }
    }
}

/// Dense hidden widths, or an explicit layer stack that overrides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: default_hidden(),
            layers: None,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, input_shape: &[usize], num_classes: usize) -> Result<std::sync::Arc<Architecture>> {
        let arch = match &self.layers {
            Some(layers) => Architecture::new(input_shape, layers)?,
            None => {
                if input_shape.len() != 1 {
                    return Err(Error::config(
                        "model.layers",
                        "multi-dimensional input needs an explicit layer stack",
                    ));
                }
                Architecture::mlp(input_shape[0], &self.hidden, num_classes)?
            }
        };
        if arch.num_classes() != num_classes {
            return Err(Error::config(
                "model.layers",
                format!("model has {} outputs, dataset has {num_classes} classes", arch.num_classes()),
            ));
        }
        Ok(arch)
    }
}

/// Inclusive round window for averaged metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricWindow {
    pub from_round: usize,
    pub to_round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MaliciousFraction,
    N,
    Beta,
    Aggregator,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MaliciousFraction => "malicious_fraction",
            SweepAxis::N => "n",
            SweepAxis::Beta => "beta",
            SweepAxis::Aggregator => "aggregator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Name(String),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectNConfig {
    #[serde(default = "one")]
    pub from: usize,
    /// Unset means `N_C - 2`.
    #[serde(default)]
    pub to: Option<usize>,
}

fn one() -> usize {
    1
}
fn default_runs() -> usize {
    1
}
fn default_name() -> String {
    "experiment".to_string()
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub exec: ExecMode,
    /// Write logits features of the final global models.
    #[serde(default)]
    pub export_features: bool,
    pub dataset: DatasetSpec,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelSpec,
    pub training: TrainingConfig,
    #[serde(default = "AggregatorSpec::fed_avg")]
    pub aggregator: AggregatorSpec,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub botpa: Option<BotpaConfig>,
    #[serde(default)]
    pub window: Option<MetricWindow>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub select_n: Option<SelectNConfig>,
}

/// Default window: the last ten rounds (or all rounds if fewer).
pub fn default_window(rounds: usize) -> MetricWindow {
    MetricWindow {
        from_round: rounds.saturating_sub(9).max(1),
        to_round: rounds,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "document".to_string());
            Error::config(key, e.message().to_string())
        })?;
        cfg.resolved()
    }

    pub fn window(&self) -> MetricWindow {
        self.window.unwrap_or_else(|| default_window(self.training.rounds))
    }

    /// Number of malicious clients implied by the attack section.
    pub fn malicious_count(&self) -> usize {
        let n = self.partition.clients;
        match &self.attack {
            None => 0,
            Some(a) if !a.malicious_clients.is_empty() => a.malicious_clients.len(),
            Some(a) => fraction_count(a.malicious_fraction.unwrap_or(0.0), n),
        }
    }

    /// Fills defaults that depend on other keys and validates everything.
    pub fn resolved(mut self) -> Result<Self> {
        if self.window.is_none() {
            self.window = Some(default_window(self.training.rounds));
        }
        if let Some(a) = &mut self.attack {
            a.malicious_clients.sort_unstable();
            a.malicious_clients.dedup();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs", "must be >= 1"));
        }
        let n = self.partition.clients;
        if n == 0 {
            return Err(Error::config("partition.clients", "must be >= 1"));
        }
        self.partition.scheme()?;
        if let DatasetSpec::Blobs(b) = &self.dataset {
            b.validate()?;
            if b.test_per_class == 0 {
                return Err(Error::config("dataset.test_per_class", "must be positive"));
            }
        }
        self.training.validate()?;
        let classes = self.dataset.num_classes();
        if let Some(a) = &self.attack {
            a.validate(classes.unwrap_or(usize::MAX), n)?;
            if self.malicious_count() == 0 {
                return Err(Error::config(
                    "attack.malicious_fraction",
                    format!("selects no client out of {n}"),
                ));
            }
        }
        if let Some(b) = &self.botpa {
            if self.attack.is_none() {
                return Err(Error::config("botpa", "boosting requires an [attack] section"));
            }
            if let Some(k) = classes {
                b.validate(k)?;
            }
        }
        let mut agg = self.aggregator.clone();
        if agg.f_byzantine.is_none() {
            agg.f_byzantine = Some(self.malicious_count());
        }
        agg.validate(n)?;
        let w = self.window();
        if w.from_round == 0 || w.from_round > w.to_round || w.to_round > self.training.rounds {
            return Err(Error::config(
                "window",
                format!("must satisfy 1 <= from_round <= to_round <= {}", self.training.rounds),
            ));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::config("sweep.values", "must not be empty"));
            }
        }
        Ok(())
    }

    /// The config with one sweep value applied, validated.
    pub fn with_axis(&self, axis: SweepAxis, value: &SweepValue) -> Result<Self> {
        let mut c = self.clone();
        c.sweep = None;
        let num = |v: &SweepValue| match v {
            SweepValue::Number(x) => Ok(*x),
            SweepValue::Name(s) => Err(Error::config(
                format!("sweep.values ({})", axis.name()),
                format!("expected a number, got `{s}`"),
            )),
        };
        match axis {
            SweepAxis::MaliciousFraction => {
                let a = c
                    .attack
                    .as_mut()
                    .ok_or_else(|| Error::config("attack", "malicious_fraction sweep needs an attack"))?;
                a.malicious_clients.clear();
                a.malicious_fraction = Some(num(value)?);
            }
            SweepAxis::N => {
                let v = num(value)?;
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::config("botpa.num_intermediate", format!("{v} is not a positive integer")));
                }
                c.botpa
                    .as_mut()
                    .ok_or_else(|| Error::config("botpa", "N sweep needs a [botpa] section"))?
                    .num_intermediate = v as usize;
            }
            SweepAxis::Beta => {
                c.partition.scheme = SchemeName::Dirichlet;
                c.partition.beta = Some(num(value)?);
            }
            SweepAxis::Aggregator => {
                let name = match value {
                    SweepValue::Name(s) => s.as_str(),
                    SweepValue::Number(_) => {
                        return Err(Error::config("sweep.values (aggregator)", "expected a rule name"))
                    }
                };
                let kind = AggregatorKind::parse(name)
                    .ok_or_else(|| Error::config("sweep.values (aggregator)", format!("unknown rule `{name}`")))?;
                c.aggregator.kind = kind;
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("resolved_config", e.to_string()))
    }
}

/// `round(fraction * n)`, at least one when the fraction is positive.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    if fraction <= 0.0 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Reads, parses, and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
}
