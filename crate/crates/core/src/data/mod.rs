//! Labelled sample sets, the `.qds` file format, synthetic generators, and
//! class rebalancing by undersampling.

mod qds;
mod synth;

pub use qds::{read_qds, read_qds_file, write_qds, write_qds_file, QDS_MAGIC};
pub use synth::{synthesize, SynthKind, SynthOptions};

use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access dataset `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{0}")]
    Unreachable(String),
}

/// Samples stored row-major as `f32`, one class index per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if sample_shape.is_empty() || sample_shape.contains(&0) {
            return Err(DataError::Invalid(format!("bad sample shape {sample_shape:?}")));
        }
        if classes == 0 {
            return Err(DataError::Invalid("class count must be positive".into()));
        }
        let width: usize = sample_shape.iter().product();
        if features.len() != width * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            sample_shape,
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_width(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.sample_width();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The listed samples, in the listed order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let w = self.sample_width();
        let mut features = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels,
            classes: self.classes,
        }
    }

    /// Stacks the listed samples into a `[batch, ...sample_shape]` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let mut data = Vec::with_capacity(indices.len() * self.sample_width());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::of(v as f64)));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Every sample as one batch.
    pub fn all<T: Real>(&self) -> (Tensor<T>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Splits off the first `floor(len * fraction)` samples as the first part.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).floor() as usize;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Same samples with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset, DataError> {
        Dataset::new(self.sample_shape.clone(), self.features.clone(), labels, self.classes)
    }
}

/// Undersamples every class whose count exceeds `ratio` times the smallest
/// class down to `round(ratio * smallest)`, choosing survivors uniformly
/// without replacement from a stream seeded by `seed`. Smaller classes and
/// the original sample order are preserved.
pub fn rebalance(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(DataError::Invalid(format!(
            "target ratio must be a finite majority:minority ratio >= 1, got {ratio}"
        )));
    }
    let counts = ds.class_counts();
    if counts.len() < 2 {
        return Err(DataError::Invalid("rebalancing needs at least two classes".into()));
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(DataError::Invalid(format!("class {empty} has no samples")));
    }
    let minority = *counts.iter().min().expect("two or more classes");
    let majority = *counts.iter().max().expect("two or more classes");
    let current = majority as f64 / minority as f64;
    let cap = (ratio * minority as f64).round() as usize;
    if cap > majority {
        return Err(DataError::Unreachable(format!(
            "target ratio {ratio}:1 is unreachable by undersampling; the maximum achievable ratio is {current}:1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; ds.len()];
    for (class, &count) in counts.iter().enumerate() {
        if count <= cap {
            continue;
        }
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        let mut chosen = vec![false; count];
        for j in rand::seq::index::sample(&mut rng, count, cap) {
            chosen[j] = true;
        }
        for (&i, &c) in members.iter().zip(&chosen) {
            keep[i] = c;
        }
    }
    let indices: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(ds.subset(&indices))
}
