//! IID and Dirichlet client partitioners.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheme {
    Iid,
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub scheme: Scheme,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    /// Shards are pairwise disjoint and cover `0..n`.
    pub fn is_valid_for(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for shard in &self.shards {
            for &i in shard {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Stratified uniform split: shard sizes and per-class counts differ by at most one.
///
/// Indices are shuffled within each class, classes are laid end to end, and
/// the sequence is dealt round-robin over a shuffled client order.
pub fn partition_iid(ds: &Dataset, k: usize, seed_value: u64) -> Result<Partition> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot split {n} samples over {k} clients"
        )));
    }
    let mut rng = seed::rng(seed_value, &[stream::PARTITION, 0]);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut shards = vec![Vec::with_capacity(n / k + 1); k];
    let mut pos = rng.random_range(0..k);
    for mut class in ds.true_class_index() {
        class.shuffle(&mut rng);
        for i in class {
            shards[order[pos % k]].push(i);
            pos += 1;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition {
        shards,
        scheme: Scheme::Iid,
    })
}

/// One draw from a symmetric `Dir_k(beta)` via normalized gamma variates.
pub fn sample_dirichlet(k: usize, beta: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("dirichlet beta must be > 0, got {beta}")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        for d in &mut draws {
            *d /= sum;
        }
    } else {
        // every variate underflowed; all mass goes to one client
        draws.fill(0.0);
        draws[rng.random_range(0..k)] = 1.0;
    }
    Ok(draws)
}

/// Splits `total` into integer counts proportional to `props`, preserving the total.
pub fn largest_remainder(total: usize, props: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    // larger remainder first, lower index on ties
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet proportion split.
pub fn partition_dirichlet(ds: &Dataset, k: usize, beta: f64, seed_value: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::invalid("dirichlet partition needs k >= 1"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("dirichlet beta must be > 0, got {beta}")));
    }
    let mut rng = seed::rng(seed_value, &[stream::PARTITION, 1]);
    let mut shards = vec![Vec::new(); k];
    for mut class in ds.true_class_index() {
        class.shuffle(&mut rng);
        let props = sample_dirichlet(k, beta, &mut rng)?;
        let counts = largest_remainder(class.len(), &props);
        let mut start = 0;
        for (client, c) in counts.into_iter().enumerate() {
            shards[client].extend_from_slice(&class[start..start + c]);
            start += c;
        }
    }
    for (i, s) in shards.iter_mut().enumerate() {
        if s.is_empty() {
            warn!("dirichlet partition left client {i} without samples");
        }
        s.sort_unstable();
    }
    Ok(Partition {
        shards,
        scheme: Scheme::Dirichlet { beta },
    })
}

pub fn partition(ds: &Dataset, scheme: Scheme, k: usize, seed_value: u64) -> Result<Partition> {
    match scheme {
        Scheme::Iid => partition_iid(ds, k, seed_value),
        Scheme::Dirichlet { beta } => partition_dirichlet(ds, k, beta, seed_value),
    }
}
