//! Attack and accuracy metrics, round-window averaging, weight-divergence
//! checks, and logits-layer feature analysis.

mod features;
mod propositions;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Model, Tensor};
use crate::par::{self, ExecMode};

pub use features::{density_divergence, export_logits_features, logits_matrix, pca2, DENSITY_EPS};
pub use propositions::{check_proposition1, check_proposition2, DivergenceReport};

/// Metrics of the global model after one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub global_accuracy: f64,
    /// NaN for classes absent from the test set.
    pub per_class_accuracy: Vec<f64>,
    /// `None` when no attack is configured.
    pub asr: Option<f64>,
    /// Client ids admitted by a selective aggregator.
    pub selected_update_indices: Option<Vec<usize>>,
    pub aggregator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordField {
    GlobalAccuracy,
    Asr,
}

/// Accuracy summary of a model on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub asr: Option<f64>,
}

const EVAL_CHUNK: usize = 256;

/// Predicted classes for every sample, evaluated in fixed-size chunks.
pub fn predictions(model: &Model, data: &Dataset, exec: ExecMode) -> Result<Vec<usize>> {
    let n = data.len();
    let chunks = n.div_ceil(EVAL_CHUNK);
    let parts = par::try_map_range(exec, chunks, |c| {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n)).collect();
        let x: Tensor = data.samples().select_rows(&idx);
        model.predict(&x)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

fn asr_from(preds: &[usize], truth: &[usize], source: usize, target: usize) -> Result<f64> {
    let src = truth.iter().filter(|&&t| t == source).count();
    if src == 0 {
        return Err(Error::invalid(format!(
            "attack success rate needs class-{source} samples in the test set"
        )));
    }
    let hit = preds
        .iter()
        .zip(truth)
        .filter(|&(&p, &t)| t == source && p == target)
        .count();
    Ok(hit as f64 / src as f64)
}

/// Fraction of true-`source` test samples predicted as `target`.
pub fn compute_asr(model: &Model, test: &Dataset, source: usize, target: usize) -> Result<f64> {
    let preds = predictions(model, test, ExecMode::Serial)?;
    asr_from(&preds, test.targets(), source, target)
}

/// Global accuracy, per-class accuracy, and optionally the ASR of `attack = (source, target)`.
pub fn evaluate(
    model: &Model,
    test: &Dataset,
    attack: Option<(usize, usize)>,
    exec: ExecMode,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation on an empty test set"));
    }
    let preds = predictions(model, test, exec)?;
    let k = test.num_classes();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &t) in preds.iter().zip(test.targets()) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let per_class_accuracy = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
        .collect();
    let asr = attack
        .map(|(s, t)| asr_from(&preds, test.targets(), s, t))
        .transpose()?;
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        per_class_accuracy,
        asr,
    })
}

/// Relative ASR increase `(b - v) / v`; undefined when `v == 0`.
pub fn ri_asr(v_asr: f64, b_asr: f64) -> Option<f64> {
    if v_asr == 0.0 {
        None
    } else {
        Some((b_asr - v_asr) / v_asr)
    }
}

/// Mean of `field` over records with `from <= round <= to`.
pub fn windowed_mean(records: &[RoundRecord], from: usize, to: usize, field: RecordField) -> Result<f64> {
    if from == 0 || from > to {
        return Err(Error::invalid(format!("bad round window [{from}, {to}]")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in records.iter().filter(|r| (from..=to).contains(&r.round)) {
        let v = match field {
            RecordField::GlobalAccuracy => r.global_accuracy,
            RecordField::Asr => r
                .asr
                .ok_or_else(|| Error::invalid(format!("round {} has no ASR", r.round)))?,
        };
        sum += v;
        count += 1;
    }
    if count != to - from + 1 {
        return Err(Error::invalid(format!(
            "round window [{from}, {to}] not covered by the {} records",
            records.len()
        )));
    }
    Ok(sum / count as f64)
}

/// Float formatting for CSV output: shortest round-trip form, `NA` for NaN.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v}")
    }
}
