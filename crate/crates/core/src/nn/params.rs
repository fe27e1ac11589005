//! Flattened parameter vectors with a per-layer offset table.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Batch-norm running statistics live in the vector but receive no gradient.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// A single anonymous trainable segment, for raw vectors.
    pub fn flat(len: usize) -> Self {
        let mut l = Layout::new();
        l.push(0, "flat", len, true);
        l
    }

    /// Appends a segment directly after the previous one and returns its offset.
    pub fn push(&mut self, layer: usize, name: &str, len: usize, trainable: bool) -> usize {
        let offset = self.total;
        self.segments.push(Segment {
            layer,
            name: name.to_string(),
            offset,
            len,
            trainable,
        });
        self.total += len;
        offset
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for s in &self.segments {
            mask[s.offset..s.offset + s.len].fill(s.trainable);
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(ParamVector { values, layout })
    }

    /// Wraps a raw vector in a single flat segment.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::flat(values.len()));
        ParamVector { values, layout }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn segment(&self, layer: usize, name: &str) -> Option<&[f64]> {
        self.layout
            .segments()
            .iter()
            .find(|s| s.layer == layer && s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, layer: usize, name: &str) -> Option<&mut [f64]> {
        let seg = self
            .layout
            .segments()
            .iter()
            .find(|s| s.layer == layer && s.name == name)?
            .clone();
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    pub fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::Layout {
                expected: self.len(),
                actual: other.len(),
            })
        }
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| alpha * v).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity; `None` when either vector has norm below `1e-12`.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
