//! Randomized-softmax loss for images with several positive tags, and the
//! per-class sigmoid posterior used for calibration.
//!
//! Each time an image is visited one of its positive tags is drawn
//! uniformly and the image is trained with ordinary softmax cross-entropy
//! against that single tag.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{sigmoid, softmax_row};
use crate::tensor::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("label set is empty")]
    Empty,
    #[error("tag index {index} out of range for {vocab} tags")]
    OutOfRange { index: usize, vocab: usize },
}

/// Positive tag indices of one image, sorted and unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet {
    positives: Vec<usize>,
}

impl LabelSet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        LabelSet { positives: set.into_iter().collect() }
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn contains(&self, tag: usize) -> bool {
        self.positives.binary_search(&tag).is_ok()
    }

    pub fn check(&self, vocab: usize) -> Result<(), LabelError> {
        match self.positives.last() {
            Some(&index) if index >= vocab => Err(LabelError::OutOfRange { index, vocab }),
            _ => Ok(()),
        }
    }

    /// Keeps each positive independently with probability `1 - drop`.
    pub fn thin<R: Rng + ?Sized>(&self, drop: f64, rng: &mut R) -> LabelSet {
        LabelSet { positives: self.positives.iter().copied().filter(|_| rng.gen::<f64>() >= drop).collect() }
    }
}

/// Draws the training target for one visit of an image.
pub fn sample_target<R: Rng + ?Sized>(labels: &LabelSet, rng: &mut R) -> Result<usize, LabelError> {
    if labels.is_empty() {
        return Err(LabelError::Empty);
    }
    Ok(labels.positives[rng.gen_range(0..labels.len())])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledLoss<T> {
    pub loss: T,
    pub grad: Vec<T>,
    pub chosen: usize,
}

/// Cross-entropy of `logits` against one uniformly drawn positive tag,
/// with the gradient with respect to the logits.
pub fn randomized_softmax_loss<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    labels: &LabelSet,
    rng: &mut R,
) -> Result<SampledLoss<T>, LabelError> {
    labels.check(logits.len())?;
    let chosen = sample_target(labels, rng)?;
    let (loss, mut grad) = softmax_row(logits, chosen);
    grad[chosen] -= T::one();
    Ok(SampledLoss { loss, grad, chosen })
}

/// Exact expectation of [`randomized_softmax_loss`] over the draw.
pub fn expected_loss_oracle(logits: &[f64], labels: &LabelSet) -> Result<f64, LabelError> {
    if labels.is_empty() {
        return Err(LabelError::Empty);
    }
    labels.check(logits.len())?;
    let total: f64 = labels.positives().iter().map(|&t| softmax_row(logits, t).0).sum();
    Ok(total / labels.len() as f64)
}

/// `1 / (1 + exp(-logit - bias))`.
pub fn posterior(logit: f64, bias: f64) -> f64 {
    sigmoid(logit + bias)
}

/// Logit at which the unbiased posterior equals `p`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Mean positives per image, reported alongside training runs.
pub fn mean_positives<'a>(labels: impl IntoIterator<Item = &'a LabelSet>) -> f64 {
    let (sum, count) = labels.into_iter().fold((0usize, 0usize), |(s, c), l| (s + l.len(), c + 1));
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}
