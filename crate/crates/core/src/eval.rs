//! Confusion-matrix accumulation and mean intersection-over-union.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, LabelImage, Result, IGNORE};

/// Pixel counts indexed by (truth, prediction).
///
/// Pixels whose truth is [`IGNORE`] are skipped. A prediction of [`IGNORE`]
/// on a labelled pixel means "no class assigned" and counts as a miss for the
/// true class only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    unassigned: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unassigned: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Labelled pixels that received no class.
    pub fn unassigned(&self, truth: usize) -> u64 {
        self.unassigned[truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    pub fn accumulate(&mut self, pred: &LabelImage, truth: &LabelImage) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::shape(
                "prediction",
                &[truth.height(), truth.width()],
                &[pred.height(), pred.width()],
            ));
        }
        truth.validate(self.classes)?;
        pred.validate(self.classes)?;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t == IGNORE {
                continue;
            }
            if p == IGNORE {
                self.unassigned[usize::from(t)] += 1;
            } else {
                self.counts[usize::from(t) * self.classes + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    /// Adds the counts of another matrix with the same class count.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "confusion matrix",
                &[self.classes, self.classes],
                &[other.classes, other.classes],
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unassigned.iter_mut().zip(&other.unassigned) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU `TP / (TP + FP + FN)` and their mean over classes with a
    /// non-empty union.
    pub fn miou(&self) -> Result<MiouReport> {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.get(k, k);
            let truth_total: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() + self.unassigned[k];
            let pred_total: u64 = (0..c).map(|t| self.get(t, k)).sum();
            let union = truth_total + pred_total - tp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let observed: Vec<f64> = per_class.iter().flatten().copied().collect();
        if observed.is_empty() {
            return Err(Error::EmptyConfusion);
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

/// IoU per class (`None` for classes absent from both prediction and truth)
/// and the mean over present classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}
