use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability vector over classes. Hard labels are the one-hot special case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn hard(class: usize, num_classes: usize) -> Self {
        assert!(class < num_classes, "class {class} >= {num_classes}");
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        SoftLabel { probs }
    }

    /// Validates entries in `[0, 1]` summing to one within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("soft label needs at least one class"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!(
                "soft label entries must lie in [0, 1]: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("soft label sums to {sum}")));
        }
        Ok(SoftLabel { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Lowest class with the largest probability.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// The class index when exactly one entry equals one.
    pub fn hard_class(&self) -> Option<usize> {
        let mut found = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 1.0 {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            } else if p != 0.0 {
                return None;
            }
        }
        found
    }

    pub fn is_hard(&self) -> bool {
        self.hard_class().is_some()
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_label_has_single_one() {
        let l = SoftLabel::hard(2, 4);
        assert_eq!(l.hard_class(), Some(2));
        assert_eq!(l.argmax(), 2);
        let s = SoftLabel::new(vec![0.0, 0.6, 0.0, 0.4]).unwrap();
        assert!(!s.is_hard());
        assert_eq!(s.argmax(), 1);
    }

    #[test]
    fn invalid_soft_labels_rejected() {
        assert!(SoftLabel::new(vec![0.5, 0.6]).is_err());
        assert!(SoftLabel::new(vec![-0.1, 1.1]).is_err());
        assert!(SoftLabel::new(vec![]).is_err());
    }
}
