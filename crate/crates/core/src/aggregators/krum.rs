use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::nn::params::sq_dist;
use crate::nn::ParamVector;

use super::fedavg;

/// Sum of squared distances from each vector to its `n - f - 2` nearest others.
pub fn krum_scores(vectors: &[&[f64]], f: usize) -> Result<Vec<f64>> {
    let n = vectors.len();
    if n < 2 * f + 3 {
        return Err(Error::Aggregation(format!(
            "krum requires n >= 2f + 3, got n = {n}, f = {f}"
        )));
    }
    let neighbours = n - f - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(vectors[i], vectors[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect())
}

/// Indices ordered by ascending score, lower index first on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Single-update Krum: returns the position of the winner and its delta.
pub fn krum(updates: &[ClientUpdate], f: usize) -> Result<(usize, ParamVector)> {
    let vs: Vec<&[f64]> = updates.iter().map(|u| u.delta.values()).collect();
    let scores = krum_scores(&vs, f)?;
    let best = ranked(&scores)[0];
    Ok((best, updates[best].delta.clone()))
}

/// Multi-Krum: the `m` best-scoring updates, combined by weighted FedAvg.
/// Returned positions are in score order.
pub fn multi_krum(updates: &[ClientUpdate], f: usize, m: usize) -> Result<(Vec<usize>, ParamVector)> {
    if m == 0 || m > updates.len() {
        return Err(Error::Aggregation(format!(
            "multi-krum m = {m} outside 1..={}",
            updates.len()
        )));
    }
    let vs: Vec<&[f64]> = updates.iter().map(|u| u.delta.values()).collect();
    let scores = krum_scores(&vs, f)?;
    let chosen: Vec<usize> = ranked(&scores).into_iter().take(m).collect();
    let mut picked: Vec<ClientUpdate> = chosen.iter().map(|&i| updates[i].clone()).collect();
    // sum in input order so the result does not depend on score ties
    picked.sort_by_key(|u| u.client_id);
    Ok((chosen, fedavg(&picked)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::raw_updates;

    #[test]
    fn outlier_rejected_and_tie_goes_low() {
        let u = raw_updates(&[vec![0.0], vec![0.0], vec![10.0]], &[1, 1, 1]);
        let vs: Vec<&[f64]> = u.iter().map(|u| u.delta.values()).collect();
        assert_eq!(krum_scores(&vs, 0).unwrap(), vec![0.0, 0.0, 100.0]);
        let (i, d) = krum(&u, 0).unwrap();
        assert_eq!(i, 0);
        assert_eq!(d.values(), &[0.0]);
    }

    #[test]
    fn identical_updates_select_first() {
        let u = raw_updates(&vec![vec![1.0, 2.0]; 5], &[1; 5]);
        assert_eq!(krum(&u, 1).unwrap().0, 0);
    }

    #[test]
    fn precondition_names_n_and_f() {
        let u = raw_updates(&vec![vec![1.0]; 4], &[1; 4]);
        let err = krum(&u, 1).unwrap_err().to_string();
        assert!(err.contains("n = 4") && err.contains("f = 1"), "{err}");
    }

    #[test]
    fn multi_krum_m1_is_krum() {
        let u = raw_updates(
            &[vec![0.1, 0.0], vec![0.0, 0.2], vec![5.0, 5.0], vec![0.1, 0.1], vec![-0.1, 0.0]],
            &[1, 2, 3, 4, 5],
        );
        let (i, d) = krum(&u, 1).unwrap();
        let (idx, dm) = multi_krum(&u, 1, 1).unwrap();
        assert_eq!(idx, vec![i]);
        assert_eq!(d, dm);
    }

    #[test]
    fn multi_krum_all_is_fedavg() {
        let u = raw_updates(&[vec![1.0], vec![2.0], vec![7.0]], &[1, 2, 3]);
        let (_, d) = multi_krum(&u, 0, 3).unwrap();
        let expected = fedavg(&u).unwrap();
        assert!((d.values()[0] - expected.values()[0]).abs() < 1e-15);
    }
}
