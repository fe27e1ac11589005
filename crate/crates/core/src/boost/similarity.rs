//! Sample- and class-level similarity from per-sample loss gradients
//! (contribution degrees) and from logits-layer features.
//!
//! A class score is the mean pairwise cosine over the two classes' samples.
//! Because cosine is a dot product of unit vectors, that mean equals the dot
//! product of the two classes' mean unit vectors, which is how it is computed.

use log::debug;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::params::{cosine, dot, norm};
use crate::nn::{Model, SoftLabel};
use crate::par::{self, ExecMode};
use crate::seed::{self, stream};

/// Which per-sample gradient stands in for `grad_w f_w(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContribGradient {
    /// Gradient of `-log f` under the sample's current training label.
    TrainingLabel,
    /// Gradients of `-log f_i` for every output `i`, concatenated. The cosine
    /// of these stacks is the normalized trace of the output-gradient kernel
    /// and does not depend on labels.
    #[default]
    AllOutputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Contrib,
    Ftrs,
}

impl SimilarityKind {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Contrib => "contrib",
            SimilarityKind::Ftrs => "ftrs",
        }
    }
}

/// Pairwise class scores. Entries involving a class with no samples are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSimilarityMatrix {
    pub kind: SimilarityKind,
    pub scores: Vec<Vec<f64>>,
    /// Surrogate epoch whose weights produced the scores.
    pub checkpoint: usize,
}

impl ClassSimilarityMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.scores[a][b]
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }
}

/// The gradient representation of one sample.
pub fn contrib_vector(model: &Model, x: &[f64], label: &SoftLabel, route: ContribGradient) -> Result<Vec<f64>> {
    match route {
        ContribGradient::TrainingLabel => Ok(model.per_sample_loss_gradient(x, label)?.into_values()),
        ContribGradient::AllOutputs => {
            let k = model.num_classes();
            let mut out = Vec::with_capacity(k * model.params().len());
            for c in 0..k {
                let g = model.per_sample_loss_gradient(x, &SoftLabel::hard(c, k))?;
                out.extend_from_slice(g.values());
            }
            Ok(out)
        }
    }
}

fn cosine_or_zero(a: &[f64], b: &[f64], what: &str) -> f64 {
    cosine(a, b).unwrap_or_else(|| {
        debug!("{what}: zero-norm vector, similarity set to 0");
        0.0
    })
}

/// Cosine of two samples' per-sample loss gradients under their labels.
pub fn is_contrib(model: &Model, x: &[f64], label_x: &SoftLabel, x2: &[f64], label_x2: &SoftLabel) -> Result<f64> {
    is_contrib_with(model, x, label_x, x2, label_x2, ContribGradient::TrainingLabel)
}

pub fn is_contrib_with(
    model: &Model,
    x: &[f64],
    label_x: &SoftLabel,
    x2: &[f64],
    label_x2: &SoftLabel,
    route: ContribGradient,
) -> Result<f64> {
    let a = contrib_vector(model, x, label_x, route)?;
    let b = contrib_vector(model, x2, label_x2, route)?;
    Ok(cosine_or_zero(&a, &b, "is_contrib"))
}

/// Cosine of two samples' logits.
pub fn is_ftrs(model: &Model, x: &[f64], x2: &[f64]) -> Result<f64> {
    let a = model.logits_features(x)?;
    let b = model.logits_features(x2)?;
    Ok(cosine_or_zero(&a, &b, "is_ftrs"))
}

/// At most `cap` of `members`, chosen by a seed-deterministic draw and kept
/// in ascending order.
pub fn capped(members: &[usize], cap: Option<usize>, seed_value: u64, class: usize) -> Vec<usize> {
    match cap {
        Some(c) if members.len() > c => {
            let mut rng = seed::rng(seed_value, &[stream::SUBSAMPLE, class as u64]);
            let mut pick: Vec<usize> = index::sample(&mut rng, members.len(), c)
                .into_iter()
                .map(|i| members[i])
                .collect();
            pick.sort_unstable();
            pick
        }
        _ => members.to_vec(),
    }
}

/// Mean of the unit-normalized vectors; zero vectors contribute zero.
fn mean_unit(vectors: Vec<Vec<f64>>) -> Vec<f64> {
    let n = vectors.len();
    let mut acc = vec![0.0; vectors.first().map_or(0, Vec::len)];
    for v in vectors {
        let nv = norm(&v);
        if nv < 1e-12 {
            continue;
        }
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x / nv;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    acc
}

/// Dot product of two mean unit vectors, clamped against rounding past +-1.
fn bounded_dot(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

/// Sampling options shared by the class-level scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSampling {
    pub cap: Option<usize>,
    pub seed: u64,
    pub exec: ExecMode,
}

impl ClassSampling {
    pub fn all() -> Self {
        ClassSampling {
            cap: None,
            seed: 0,
            exec: ExecMode::Serial,
        }
    }
}

fn class_members(data: &Dataset, class: usize, sampling: &ClassSampling) -> Result<Vec<usize>> {
    if class >= data.num_classes() {
        return Err(Error::invalid(format!("class {class} out of range")));
    }
    let members = &data.true_class_index()[class];
    if members.is_empty() {
        return Err(Error::invalid(format!("class {class} has no samples")));
    }
    Ok(capped(members, sampling.cap, sampling.seed, class))
}

fn contrib_mean(model: &Model, data: &Dataset, idx: &[usize], route: ContribGradient, exec: ExecMode) -> Result<Vec<f64>> {
    let vs = par::try_map_range(exec, idx.len(), |k| {
        let i = idx[k];
        contrib_vector(model, data.sample(i), data.label(i), route)
    })?;
    Ok(mean_unit(vs))
}

fn ftrs_mean(model: &Model, data: &Dataset, idx: &[usize], exec: ExecMode) -> Result<Vec<f64>> {
    let vs = par::try_map_range(exec, idx.len(), |k| model.logits_features(data.sample(idx[k])))?;
    Ok(mean_unit(vs))
}

/// Mean pairwise gradient cosine between two classes (grouped by true class,
/// gradients under the current training labels).
pub fn cs_contrib(
    model: &Model,
    data: &Dataset,
    c1: usize,
    c2: usize,
    sampling: &ClassSampling,
    route: ContribGradient,
) -> Result<f64> {
    let a = contrib_mean(model, data, &class_members(data, c1, sampling)?, route, sampling.exec)?;
    let b = contrib_mean(model, data, &class_members(data, c2, sampling)?, route, sampling.exec)?;
    Ok(bounded_dot(&a, &b))
}

/// Mean pairwise logits cosine between two classes.
pub fn cs_ftrs(model: &Model, data: &Dataset, c1: usize, c2: usize, sampling: &ClassSampling) -> Result<f64> {
    let a = ftrs_mean(model, data, &class_members(data, c1, sampling)?, sampling.exec)?;
    let b = ftrs_mean(model, data, &class_members(data, c2, sampling)?, sampling.exec)?;
    Ok(bounded_dot(&a, &b))
}

/// Full class-by-class matrix of either kind.
pub fn similarity_matrix(
    kind: SimilarityKind,
    model: &Model,
    data: &Dataset,
    sampling: &ClassSampling,
    route: ContribGradient,
    checkpoint: usize,
) -> Result<ClassSimilarityMatrix> {
    let k = data.num_classes();
    let by_class = data.true_class_index();
    let mut means: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            means.push(None);
            continue;
        }
        let idx = capped(members, sampling.cap, sampling.seed, c);
        means.push(Some(match kind {
            SimilarityKind::Contrib => contrib_mean(model, data, &idx, route, sampling.exec)?,
            SimilarityKind::Ftrs => ftrs_mean(model, data, &idx, sampling.exec)?,
        }));
    }
    let scores = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| match (&means[a], &means[b]) {
                    (Some(x), Some(y)) => bounded_dot(x, y),
                    _ => f64::NAN,
                })
                .collect()
        })
        .collect();
    Ok(ClassSimilarityMatrix {
        kind,
        scores,
        checkpoint,
    })
}
