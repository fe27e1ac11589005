//! Three-phase Flame aggregation: cosine-cluster filtering, median-norm
//! clipping, Gaussian noise.
//!
//! The filter is a complete-linkage agglomeration over cosine distances.
//! Among dendrogram cut levels whose largest cluster holds at least
//! `floor(n/2) + 1` members, the level followed by the widest jump in merge
//! height is chosen (later levels win ties), and its largest cluster is kept.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::nn::params::{dot, norm};
use crate::nn::ParamVector;
use crate::par::{self, ExecMode};
use crate::seed::{self, stream};

use super::stats::median;

#[derive(Debug, Clone, PartialEq)]
pub struct FlameOutcome {
    pub delta: ParamVector,
    /// Positions (in input order) admitted by the filter, ascending.
    pub kept: Vec<usize>,
    /// Client ids of the admitted updates, ascending.
    pub kept_clients: Vec<usize>,
    /// Median L2 norm of the admitted deltas.
    pub clip_norm: f64,
}

/// `1 - cos(a, b)`; a zero vector is treated as orthogonal to everything.
pub fn cosine_distance_matrix(vectors: &[&[f64]], exec: ExecMode) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    par::map_range(exec, n, |i| {
        (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else if norms[i] < 1e-12 || norms[j] < 1e-12 {
                    1.0
                } else {
                    1.0 - (dot(vectors[i], vectors[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                }
            })
            .collect()
    })
}

/// Majority cluster of the complete-linkage dendrogram under the widest-gap cut.
/// Returns `None` when no level yields a cluster of `min_size` members.
pub fn complete_linkage_majority(dist: &[Vec<f64>], min_size: usize) -> Option<Vec<usize>> {
    let n = dist.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // levels[j] = (largest cluster after j merges, height of merge j)
    let mut levels: Vec<(Vec<usize>, f64)> = vec![(vec![0], 0.0)];
    let linkage = |a: &[usize], b: &[usize]| {
        a.iter()
            .flat_map(|&i| b.iter().map(move |&j| dist[i][j]))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let h = linkage(&clusters[a], &clusters[b]);
                if h.is_nan() {
                    return None;
                }
                if best.is_none_or(|(bh, _, _)| h < bh) {
                    best = Some((h, a, b));
                }
            }
        }
        let (h, a, b) = best.expect("at least two clusters");
        let merged_b = clusters.remove(b);
        clusters[a].extend(merged_b);
        clusters[a].sort_unstable();
        // clusters stay ordered by smallest member
        clusters.sort_by_key(|c| c[0]);
        let largest = clusters
            .iter()
            .max_by(|x, y| x.len().cmp(&y.len()).then(y[0].cmp(&x[0])))
            .expect("non-empty")
            .clone();
        levels.push((largest, h));
    }
    let mut choice: Option<(f64, usize)> = None;
    for j in 0..levels.len() {
        if levels[j].0.len() < min_size {
            continue;
        }
        let gap = if j + 1 < levels.len() {
            levels[j + 1].1 - levels[j].1
        } else {
            0.0
        };
        if choice.is_none_or(|(g, _)| gap >= g) {
            choice = Some((gap, j));
        }
    }
    choice.map(|(_, j)| levels[j].0.clone())
}

pub fn flame(updates: &[ClientUpdate], lambda_noise: f64, seed_value: u64) -> Result<FlameOutcome> {
    flame_with(updates, lambda_noise, seed_value, ExecMode::Serial)
}

pub fn flame_with(
    updates: &[ClientUpdate],
    lambda_noise: f64,
    seed_value: u64,
    exec: ExecMode,
) -> Result<FlameOutcome> {
    let n = updates.len();
    if n < 3 {
        return Err(Error::Aggregation(format!("flame needs n >= 3, got {n}")));
    }
    if !(lambda_noise >= 0.0) {
        return Err(Error::Aggregation(format!(
            "flame noise scale must be >= 0, got {lambda_noise}"
        )));
    }
    for u in &updates[1..] {
        updates[0].delta.check_same_layout(&u.delta)?;
    }
    // canonical order by client id, so input permutations cannot change the sum
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (updates[i].client_id, i));
    let vectors: Vec<&[f64]> = order.iter().map(|&i| updates[i].delta.values()).collect();

    let dist = cosine_distance_matrix(&vectors, exec);
    let kept_canon = complete_linkage_majority(&dist, n / 2 + 1).unwrap_or_else(|| {
        log::warn!("flame filter formed no majority cluster; keeping all updates");
        (0..n).collect()
    });

    let mut norms: Vec<f64> = kept_canon.iter().map(|&i| norm(vectors[i])).collect();
    let clip = median(&mut norms);

    let mut mean = vec![0.0; vectors[0].len()];
    for &i in &kept_canon {
        let v = vectors[i];
        let nv = norm(v);
        let scale = if nv > clip && nv > 0.0 { clip / nv } else { 1.0 };
        for (m, x) in mean.iter_mut().zip(v) {
            *m += scale * x;
        }
    }
    let k = kept_canon.len() as f64;
    for m in &mut mean {
        *m /= k;
    }
    let sigma = lambda_noise * clip;
    if sigma > 0.0 {
        let mut rng = seed::rng(seed_value, &[stream::FLAME]);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Aggregation(e.to_string()))?;
        for m in &mut mean {
            *m += normal.sample(&mut rng);
        }
    }

    let mut kept: Vec<usize> = kept_canon.iter().map(|&c| order[c]).collect();
    kept.sort_unstable();
    let mut kept_clients: Vec<usize> = kept.iter().map(|&i| updates[i].client_id).collect();
    kept_clients.sort_unstable();
    Ok(FlameOutcome {
        delta: ParamVector::from_values(updates[0].delta.layout().clone(), mean)?,
        kept,
        kept_clients,
        clip_norm: clip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::raw_updates;

    #[test]
    fn identical_updates_without_noise_pass_through() {
        let u = raw_updates(&vec![vec![0.3, -1.2, 2.0]; 5], &[1; 5]);
        let out = flame(&u, 0.0, 0).unwrap();
        assert_eq!(out.kept, vec![0, 1, 2, 3, 4]);
        for (a, b) in out.delta.values().iter().zip([0.3, -1.2, 2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn collinear_scaled_copy_is_clipped() {
        // cosine distance cannot see a pure rescaling; clipping neutralizes it
        let mut vs = vec![vec![1.0, 2.0, -1.0]; 6];
        vs.push(vec![100.0, 200.0, -100.0]);
        let u = raw_updates(&vs, &[1; 7]);
        let out = flame(&u, 0.0, 0).unwrap();
        for (a, b) in out.delta.values().iter().zip([1.0, 2.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_pair_filtered() {
        let mut vs = vec![
            vec![1.0, 0.1, 0.0],
            vec![1.0, 0.0, 0.1],
            vec![0.9, 0.1, 0.1],
            vec![1.1, -0.1, 0.0],
        ];
        vs.push(vec![-1.0, 0.0, 0.0]);
        let u = raw_updates(&vs, &[1; 5]);
        let out = flame(&u, 0.0, 0).unwrap();
        assert_eq!(out.kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_few_updates() {
        let u = raw_updates(&[vec![1.0], vec![2.0]], &[1, 1]);
        assert!(flame(&u, 0.0, 0).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let u = raw_updates(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![1.0, 0.1]], &[1; 3]);
        let a = flame(&u, 0.5, 3).unwrap();
        let b = flame(&u, 0.5, 3).unwrap();
        let c = flame(&u, 0.5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.delta, c.delta);
    }
}
