//! Normalized amp control settings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical knob names for the six-control amp layout.
pub const DEFAULT_KNOB_LABELS: [&str; 6] = ["Gain", "Bass", "Mid", "Treble", "Master", "Presence"];

#[derive(Debug, Error)]
pub enum KnobError {
    #[error("knob vector must have at least one component")]
    Empty,
    #[error("knob component {index} ({label}) = {value} outside [0, 1]")]
    OutOfRange { index: usize, label: String, value: f64 },
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("duplicate knob label {0:?}")]
    DuplicateLabel(String),
}

/// A point in the amp's control space: one value in [0, 1] per knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobVector {
    values: Vec<f64>,
    labels: Vec<String>,
}

impl KnobVector {
    pub fn new(values: Vec<f64>, labels: Vec<String>) -> Result<Self, KnobError> {
        if values.is_empty() {
            return Err(KnobError::Empty);
        }
        if labels.len() != values.len() {
            return Err(KnobError::LabelCount { expected: values.len(), got: labels.len() });
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(KnobError::DuplicateLabel(l.clone()));
            }
        }
        for (i, v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(v) || !v.is_finite() {
                return Err(KnobError::OutOfRange { index: i, label: labels[i].clone(), value: *v });
            }
        }
        Ok(KnobVector { values, labels })
    }

    /// Labels values with the six-knob amp names (k = 6) or `knob<i>` otherwise.
    pub fn labeled(values: Vec<f64>) -> Result<Self, KnobError> {
        let labels = default_labels(values.len());
        KnobVector::new(values, labels)
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Replace values, clamping each component to [0, 1]; boundary hits land
    /// on exactly 0.0 / 1.0.
    pub fn set_clamped(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.values.len());
        for (dst, v) in self.values.iter_mut().zip(values) {
            *dst = v.clamp(0.0, 1.0);
        }
    }

    pub fn euclidean_distance(&self, other: &KnobVector) -> f64 {
        self.values
            .iter()
            .zip(other.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn default_labels(k: usize) -> Vec<String> {
    if k == DEFAULT_KNOB_LABELS.len() {
        DEFAULT_KNOB_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("knob{i}")).collect()
    }
}
