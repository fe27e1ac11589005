//! Stable softmax and soft-label cross-entropy.

use crate::error::{Error, Result};
use crate::nn::label::SoftLabel;
use crate::nn::tensor::Tensor;

/// Lower bound applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Max-subtracted softmax of one logits row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a `[batch, classes]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.row_len();
    let mut out = Vec::with_capacity(logits.data().len());
    for r in 0..logits.rows() {
        out.extend(softmax(logits.row(r)));
    }
    Tensor::new(vec![logits.rows(), c], out).expect("softmax keeps the shape")
}

/// `-sum_i s_i * ln(max(p_i, 1e-12))` for one sample.
pub fn sample_cross_entropy(probs: &[f64], label: &[f64]) -> f64 {
    probs
        .iter()
        .zip(label)
        .filter(|(_, &s)| s != 0.0)
        .map(|(&p, &s)| -s * p.max(PROB_FLOOR).ln())
        .sum()
}

/// Mean soft-label cross-entropy over the batch.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[SoftLabel]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Length(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let mut total = 0.0;
    for (r, label) in labels.iter().enumerate() {
        if label.num_classes() != probs.row_len() {
            return Err(Error::Length(format!(
                "label {r} has {} classes, model emits {}",
                label.num_classes(),
                probs.row_len()
            )));
        }
        total += sample_cross_entropy(probs.row(r), label.probs());
    }
    Ok(total / labels.len() as f64)
}
