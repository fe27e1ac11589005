//! Gaussian-blob classification data with controllable class geometry.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed::{self, stream};

/// Moves `class`'s center toward `anchor`'s: `anchor + fraction * (class - anchor)`.
/// A fraction of zero co-locates the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affinity {
    pub class: usize,
    pub anchor: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    #[serde(default)]
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    #[serde(default)]
    pub affinities: Vec<Affinity>,
    #[serde(default)]
    pub seed: u64,
}

fn default_center_scale() -> f64 {
    1.0
}

impl BlobSpec {
    pub fn new(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Self {
        BlobSpec {
            num_classes,
            per_class,
            test_per_class: 0,
            dim,
            spread,
            center_scale: default_center_scale(),
            affinities: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.dim == 0 {
            return Err(Error::config(
                "dataset",
                "num_classes, per_class and dim must be positive",
            ));
        }
        if self.spread < 0.0 || self.center_scale < 0.0 {
            return Err(Error::config("dataset", "spread and center_scale must be >= 0"));
        }
        for a in &self.affinities {
            if a.class >= self.num_classes || a.anchor >= self.num_classes {
                return Err(Error::config(
                    "dataset.affinities",
                    format!("class ids must be < {}", self.num_classes),
                ));
            }
        }
        Ok(())
    }

    /// Class centers after affinities are applied in order.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(self.seed, &[stream::DATA, 0]);
        let mut centers: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        self.center_scale * g
                    })
                    .collect()
            })
            .collect();
        for a in &self.affinities {
            let anchor = centers[a.anchor].clone();
            for (c, an) in centers[a.class].iter_mut().zip(&anchor) {
                *c = an + a.fraction * (*c - an);
            }
        }
        centers
    }

    fn draw(&self, centers: &[Vec<f64>], per_class: usize, tag: u64) -> Result<Dataset> {
        let mut rng = seed::rng(self.seed, &[stream::DATA, tag]);
        let n = per_class * self.num_classes;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut targets = Vec::with_capacity(n);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                for &mu in center {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu + self.spread * g);
                }
                targets.push(c);
            }
        }
        Dataset::new(Tensor::new(vec![n, self.dim], data)?, targets, self.num_classes)
    }

    /// Training split only.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        self.draw(&self.centers(), self.per_class, 1)
    }

    /// Training split and a held-out split drawn from the same centers.
    pub fn generate_split(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        if self.test_per_class == 0 {
            return Err(Error::config("dataset.test_per_class", "must be positive"));
        }
        let centers = self.centers();
        Ok((
            self.draw(&centers, self.per_class, 1)?,
            self.draw(&centers, self.test_per_class, 2)?,
        ))
    }
}

/// Gaussian blobs, one cluster per class.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobSpec::new(num_classes, per_class, dim, spread, seed).generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_hits_centers() {
        let spec = BlobSpec::new(2, 1, 2, 0.0, 11);
        let d = spec.generate().unwrap();
        let c = spec.centers();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample(0), c[0].as_slice());
        assert_eq!(d.sample(1), c[1].as_slice());
        assert_eq!(d.targets(), &[0, 1]);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_blobs(4, 20, 5, 0.3, 42).unwrap();
        let b = synth_blobs(4, 20, 5, 0.3, 42).unwrap();
        let c = synth_blobs(4, 20, 5, 0.3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn affinity_colocates() {
        let mut spec = BlobSpec::new(3, 1, 4, 0.0, 5);
        spec.affinities.push(Affinity {
            class: 2,
            anchor: 0,
            fraction: 0.0,
        });
        let c = spec.centers();
        assert_eq!(c[2], c[0]);
    }

    #[test]
    fn split_shares_centers() {
        let mut spec = BlobSpec::new(3, 5, 2, 0.0, 8);
        spec.test_per_class = 2;
        let (tr, te) = spec.generate_split().unwrap();
        assert_eq!(tr.len(), 15);
        assert_eq!(te.len(), 6);
        assert_eq!(tr.sample(0), te.sample(0));
    }
}
