//! Logits-layer feature export with an optional two-component PCA, and the
//! per-class density-divergence score across local models.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::params::sq_dist;
use crate::nn::Model;

use super::fmt_f64;

pub const DENSITY_EPS: f64 = 1e-9;

/// Logits of every sample, one row per sample.
pub fn logits_matrix(model: &Model, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .map(|i| model.logits_features(data.sample(i)))
        .collect()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
/// Returns eigenvalues and column eigenvectors (`vecs[row][col]`).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Projections of the centered rows onto the two leading principal axes of
/// their sample covariance. Each axis is signed so that its largest-magnitude
/// component is positive. Missing axes (dimension 1) project to zero.
pub fn pca2(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / denom;
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let mut axis: Vec<f64> = (0..d).map(|r| vecs[r][c]).collect();
            let lead = axis
                .iter()
                .copied()
                .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                axis.iter_mut().for_each(|x| *x = -*x);
            }
            axis
        })
        .collect();
    rows.iter()
        .map(|r| {
            let mut out = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                out[k] = (0..d).map(|j| (r[j] - mean[j]) * axis[j]).sum();
            }
            out
        })
        .collect()
}

/// Writes `sample_id,true_class,feature_0..feature_{d-1}[,pc_1,pc_2]`.
pub fn export_logits_features(model: &Model, data: &Dataset, out_path: &Path, with_pca: bool) -> Result<()> {
    let feats = logits_matrix(model, data)?;
    let d = model.num_classes();
    let mut out = String::from("sample_id,true_class");
    for j in 0..d {
        write!(out, ",feature_{j}").expect("string write");
    }
    if with_pca {
        out.push_str(",pc_1,pc_2");
    }
    out.push('\n');
    let pcs = if with_pca { pca2(&feats) } else { Vec::new() };
    for (i, row) in feats.iter().enumerate() {
        write!(out, "{},{}", data.ids()[i], data.target(i)).expect("string write");
        for v in row {
            write!(out, ",{}", fmt_f64(*v)).expect("string write");
        }
        if with_pca {
            write!(out, ",{},{}", fmt_f64(pcs[i][0]), fmt_f64(pcs[i][1])).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(out_path, out).map_err(|e| Error::io(out_path, e))
}

/// Mean pairwise L2 distance among the rows; zero for fewer than two rows.
fn mean_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += sq_dist(&rows[i], &rows[j]).sqrt();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Per-class spread of each model's density proxy (mean pairwise logits
/// distance of the class's probe samples): `max |d_i - d_j| / (mean d + eps)`.
/// Classes absent from the probe set score `None`.
pub fn density_divergence(models: &[Model], probe: &Dataset) -> Result<Vec<Option<f64>>> {
    if models.len() < 2 {
        return Err(Error::invalid("density divergence needs at least two models"));
    }
    let feats: Vec<Vec<Vec<f64>>> = models
        .iter()
        .map(|m| logits_matrix(m, probe))
        .collect::<Result<_>>()?;
    let by_class = probe.true_class_index();
    Ok(by_class
        .iter()
        .map(|members| {
            if members.is_empty() {
                return None;
            }
            let dens: Vec<f64> = feats
                .iter()
                .map(|f| {
                    let rows: Vec<Vec<f64>> = members.iter().map(|&i| f[i].clone()).collect();
                    mean_pairwise_distance(&rows)
                })
                .collect();
            let mean = dens.iter().sum::<f64>() / dens.len() as f64;
            let hi = dens.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = dens.iter().copied().fold(f64::INFINITY, f64::min);
            Some((hi - lo) / (mean + DENSITY_EPS))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::Architecture;

    #[test]
    fn jacobi_diagonalizes() {
        let a = vec![vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 1.0]];
        let (vals, v) = jacobi_eigen(a.clone());
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| a[r][k] * v[k][c]).sum();
                assert!((av - vals[c] * v[r][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn export_shape_and_identical_rows() {
        let ds = synth_blobs(3, 1, 4, 0.1, 2).unwrap();
        let twin = Dataset::concat(&[&ds.subset(&[0]), &ds.subset(&[0])]).unwrap();
        let model = Model::init(Architecture::mlp(4, &[5], 3).unwrap(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        export_logits_features(&model, &twin, &path, false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "sample_id,true_class,feature_0,feature_1,feature_2");
        assert_eq!(lines[1], lines[2]);
    }

    #[test]
    fn identical_models_score_zero() {
        let ds = synth_blobs(3, 5, 4, 0.5, 2).unwrap();
        let m = Model::init(Architecture::mlp(4, &[5], 3).unwrap(), 1);
        let s = density_divergence(&[m.clone(), m], &ds).unwrap();
        assert!(s.iter().all(|v| *v == Some(0.0)));
    }

    #[test]
    fn single_sample_class_and_absent_class() {
        let ds = synth_blobs(3, 2, 4, 0.5, 2).unwrap();
        let keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.target(i) != 2).collect();
        let mut keep_one = keep.clone();
        keep_one.retain(|&i| ds.target(i) != 1 || i == keep.iter().copied().find(|&j| ds.target(j) == 1).unwrap());
        let probe = ds.subset(&keep_one);
        let a = Model::init(Architecture::mlp(4, &[5], 3).unwrap(), 1);
        let b = Model::init(Architecture::mlp(4, &[5], 3).unwrap(), 2);
        let s = density_divergence(&[a, b], &probe).unwrap();
        assert_eq!(s[1], Some(0.0));
        assert_eq!(s[2], None);
    }
}
