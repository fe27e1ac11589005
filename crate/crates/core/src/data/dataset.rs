use crate::error::{Error, Result};
use crate::nn::{SoftLabel, Tensor};

/// Samples with mutable training labels and immutable ground-truth classes.
///
/// Training labels start as hard one-hot labels of the ground truth; attacks
/// rewrite them on malicious shards while `targets` keeps the true class.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<SoftLabel>,
    targets: Vec<usize>,
    ids: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, targets: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.rows() != targets.len() {
            return Err(Error::Length(format!(
                "{} samples but {} targets",
                samples.rows(),
                targets.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::invalid(format!(
                "class {bad} out of range for {num_classes} classes"
            )));
        }
        let labels = targets
            .iter()
            .map(|&t| SoftLabel::hard(t, num_classes))
            .collect();
        let ids = (0..targets.len()).collect();
        Ok(Dataset {
            samples,
            labels,
            targets,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample shape (without the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    pub fn labels(&self) -> &[SoftLabel] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &SoftLabel {
        &self.labels[i]
    }

    pub fn set_label(&mut self, i: usize, label: SoftLabel) -> Result<()> {
        if label.num_classes() != self.num_classes {
            return Err(Error::Length(format!(
                "label has {} classes, dataset has {}",
                label.num_classes(),
                self.num_classes
            )));
        }
        self.labels[i] = label;
        Ok(())
    }

    /// Ground-truth classes.
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn target(&self, i: usize) -> usize {
        self.targets[i]
    }

    /// Position of each sample in the dataset it was cut from.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Class to sample indices, by argmax of the current training labels.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_classes];
        for (i, l) in self.labels.iter().enumerate() {
            idx[l.argmax()].push(i);
        }
        idx
    }

    /// Class to sample indices, by ground truth.
    pub fn true_class_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_classes];
        for (i, &t) in self.targets.iter().enumerate() {
            idx[t].push(i);
        }
        idx
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &t in &self.targets {
            counts[t] += 1;
        }
        counts
    }

    /// Reinterprets each sample with a new shape of the same size.
    pub fn with_sample_shape(mut self, shape: &[usize]) -> Result<Dataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.samples = Tensor::new(full, self.samples.into_data())?;
        Ok(self)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenates datasets with identical sample shape and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero datasets"))?;
        let shape = first.sample_shape().to_vec();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        let mut ids = Vec::new();
        for p in parts {
            if p.sample_shape() != shape.as_slice() || p.num_classes != first.num_classes {
                return Err(Error::invalid("concat of incompatible datasets"));
            }
            data.extend_from_slice(p.samples.data());
            labels.extend_from_slice(&p.labels);
            targets.extend_from_slice(&p.targets);
            ids.extend_from_slice(&p.ids);
        }
        let mut full_shape = vec![targets.len()];
        full_shape.extend(shape);
        Ok(Dataset {
            samples: Tensor::new(full_shape, data)?,
            labels,
            targets,
            ids,
            num_classes: first.num_classes,
        })
    }

    /// Batch tensor and labels for the given indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<SoftLabel>) {
        (
            self.samples.select_rows(idx),
            idx.iter().map(|&i| self.labels[i].clone()).collect(),
        )
    }

    pub fn all(&self) -> (Tensor, Vec<SoftLabel>) {
        (self.samples.clone(), self.labels.clone())
    }
}
