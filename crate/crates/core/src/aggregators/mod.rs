//! Aggregation rules over client deltas.

mod flame;
mod krum;
mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::nn::ParamVector;
use crate::par::ExecMode;

pub use flame::{complete_linkage_majority, cosine_distance_matrix, flame, flame_with, FlameOutcome};
pub use krum::{krum, krum_scores, multi_krum};
pub use stats::{coordinate_median, coordinate_median_with, median, trimmed_mean, trimmed_mean_with};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    FedAvg,
    Krum,
    MultiKrum,
    Median,
    TrimmedMean,
    Flame,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::FedAvg => "fed_avg",
            AggregatorKind::Krum => "krum",
            AggregatorKind::MultiKrum => "multi_krum",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::Flame => "flame",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AggregatorKind::FedAvg,
            AggregatorKind::Krum,
            AggregatorKind::MultiKrum,
            AggregatorKind::Median,
            AggregatorKind::TrimmedMean,
            AggregatorKind::Flame,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

pub const DEFAULT_FLAME_LAMBDA: f64 = 1e-3;

fn default_flame_lambda() -> f64 {
    DEFAULT_FLAME_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    /// Assumed Byzantine count for Krum-family rules. Unset means the
    /// experiment's malicious-client count.
    #[serde(default)]
    pub f_byzantine: Option<usize>,
    /// Updates kept by Multi-Krum. Unset means `n - f`.
    #[serde(default)]
    pub m_select: Option<usize>,
    #[serde(default)]
    pub trim_fraction: f64,
    #[serde(default = "default_flame_lambda")]
    pub flame_lambda: f64,
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind) -> Self {
        AggregatorSpec {
            kind,
            f_byzantine: None,
            m_select: None,
            trim_fraction: 0.0,
            flame_lambda: DEFAULT_FLAME_LAMBDA,
        }
    }

    pub fn fed_avg() -> Self {
        Self::new(AggregatorKind::FedAvg)
    }

    /// Short label for records, e.g. `krum(f=1)`.
    pub fn summary(&self) -> String {
        match self.kind {
            AggregatorKind::Krum => format!("krum(f={})", self.f_byzantine.unwrap_or(0)),
            AggregatorKind::MultiKrum => format!(
                "multi_krum(f={},m={})",
                self.f_byzantine.unwrap_or(0),
                self.m_select.map_or("n-f".to_string(), |m| m.to_string())
            ),
            AggregatorKind::TrimmedMean => format!("trimmed_mean({})", self.trim_fraction),
            AggregatorKind::Flame => format!("flame(lambda={})", self.flame_lambda),
            k => k.name().to_string(),
        }
    }

    /// Checks parameters against a client count.
    pub fn validate(&self, n: usize) -> Result<()> {
        let f = self.f_byzantine.unwrap_or(0);
        match self.kind {
            AggregatorKind::Krum | AggregatorKind::MultiKrum if n > 1 && n < 2 * f + 3 => {
                Err(Error::config(
                    "aggregator.f_byzantine",
                    format!("krum needs n >= 2f + 3, got n = {n}, f = {f}"),
                ))
            }
            AggregatorKind::MultiKrum if self.m_select.is_some_and(|m| m == 0 || m > n) => {
                Err(Error::config(
                    "aggregator.m_select",
                    format!("must be in 1..={n}"),
                ))
            }
            AggregatorKind::TrimmedMean
                if !(0.0..0.5).contains(&self.trim_fraction)
                    || n.saturating_sub(2 * (self.trim_fraction * n as f64).floor() as usize)
                        == 0 =>
            {
                Err(Error::config(
                    "aggregator.trim_fraction",
                    format!("{} over-trims {n} updates", self.trim_fraction),
                ))
            }
            AggregatorKind::Flame if !(self.flame_lambda >= 0.0) => Err(Error::config(
                "aggregator.flame_lambda",
                "must be non-negative",
            )),
            AggregatorKind::Flame if n > 1 && n < 3 => Err(Error::config(
                "aggregator.kind",
                "flame needs at least 3 clients",
            )),
            _ => Ok(()),
        }
    }
}

/// Aggregated delta plus, for selective rules, the client ids that were kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub delta: ParamVector,
    pub selected: Option<Vec<usize>>,
}

fn check_updates(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no updates".into()))?;
    for u in &updates[1..] {
        first.delta.check_same_layout(&u.delta)?;
    }
    Ok(())
}

/// Sample-size-weighted mean of the deltas, computed as
/// `d_0 + sum_k (n_k / n) (d_k - d_0)`.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    check_updates(updates)?;
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Aggregation(
            "fedavg with zero total sample weight".into(),
        ));
    }
    // shifted by the first delta so that identical deltas average exactly
    let base = &updates[0].delta;
    let mut out = base.clone();
    for u in &updates[1..] {
        out.axpy(u.num_samples as f64 / total as f64, &u.delta.sub(base)?)?;
    }
    Ok(out)
}

/// Dispatches on `spec.kind`. A single update is returned unchanged by every rule.
pub fn aggregate(
    spec: &AggregatorSpec,
    updates: &[ClientUpdate],
    noise_seed: u64,
    exec: ExecMode,
) -> Result<Aggregate> {
    check_updates(updates)?;
    if updates.len() == 1 {
        return Ok(Aggregate {
            delta: updates[0].delta.clone(),
            selected: matches!(
                spec.kind,
                AggregatorKind::Krum | AggregatorKind::MultiKrum | AggregatorKind::Flame
            )
            .then(|| vec![updates[0].client_id]),
        });
    }
    let f = spec.f_byzantine.unwrap_or(0);
    match spec.kind {
        AggregatorKind::FedAvg => Ok(Aggregate {
            delta: fedavg(updates)?,
            selected: None,
        }),
        AggregatorKind::Krum => {
            let (i, delta) = krum(updates, f)?;
            Ok(Aggregate {
                delta,
                selected: Some(vec![updates[i].client_id]),
            })
        }
        AggregatorKind::MultiKrum => {
            let m = spec.m_select.unwrap_or(updates.len().saturating_sub(f).max(1));
            let (idx, delta) = multi_krum(updates, f, m)?;
            let mut ids: Vec<usize> = idx.iter().map(|&i| updates[i].client_id).collect();
            ids.sort_unstable();
            Ok(Aggregate {
                delta,
                selected: Some(ids),
            })
        }
        AggregatorKind::Median => Ok(Aggregate {
            delta: coordinate_median_with(updates, exec)?,
            selected: None,
        }),
        AggregatorKind::TrimmedMean => Ok(Aggregate {
            delta: trimmed_mean_with(updates, spec.trim_fraction, exec)?,
            selected: None,
        }),
        AggregatorKind::Flame => {
            let out = flame_with(updates, spec.flame_lambda, noise_seed, exec)?;
            Ok(Aggregate {
                delta: out.delta,
                selected: Some(out.kept_clients),
            })
        }
    }
}

#[cfg(test)]
pub(crate) fn raw_updates(vectors: &[Vec<f64>], weights: &[usize]) -> Vec<ClientUpdate> {
    vectors
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (v, &w))| ClientUpdate::new(i, ParamVector::flat(v.clone()), w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fedavg_symmetric_cancels() {
        let u = raw_updates(&[vec![1.0, -2.0], vec![-1.0, 2.0]], &[5, 5]);
        assert_eq!(fedavg(&u).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn fedavg_weighted_arithmetic() {
        let u = raw_updates(&[vec![0.0], vec![4.0]], &[1, 3]);
        assert_eq!(fedavg(&u).unwrap().values(), &[3.0]);
    }

    #[test]
    fn fedavg_zero_weight_fails() {
        let u = raw_updates(&[vec![0.0], vec![4.0]], &[0, 0]);
        assert!(fedavg(&u).is_err());
    }

    #[test]
    fn single_update_passes_through_every_rule() {
        let u = raw_updates(&[vec![0.5, -1.5]], &[3]);
        for kind in [
            AggregatorKind::FedAvg,
            AggregatorKind::Krum,
            AggregatorKind::MultiKrum,
            AggregatorKind::Median,
            AggregatorKind::TrimmedMean,
            AggregatorKind::Flame,
        ] {
            let out = aggregate(&AggregatorSpec::new(kind), &u, 1, ExecMode::Serial).unwrap();
            assert_eq!(out.delta.values(), &[0.5, -1.5], "{kind:?}");
        }
    }

    #[test]
    fn validate_krum_bound() {
        let mut s = AggregatorSpec::new(AggregatorKind::Krum);
        s.f_byzantine = Some(2);
        assert!(s.validate(6).is_err());
        assert!(s.validate(7).is_ok());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ["fed_avg", "krum", "multi_krum", "median", "trimmed_mean", "flame"] {
            assert_eq!(AggregatorKind::parse(k).unwrap().name(), k);
        }
        assert!(AggregatorKind::parse("bulyan").is_none());
    }
}
