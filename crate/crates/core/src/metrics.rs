//! Confusion matrix, accuracy and macro-F1.
//!
//! Macro-F1 averages per-class F1 over every configured class. Any 0/0 in
//! precision, recall or F1 counts as 0, so a class that is neither present
//! nor predicted contributes 0 to the average.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i][j]` = number of samples with true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n_classes..(truth + 1) * self.n_classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn support(&self, c: usize) -> u64 {
        self.row(c).iter().sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, c)).sum()
    }

    /// F1 per class as 2PR/(P+R), with 0/0 taken as 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let tp = self.true_positives(c) as f64;
                let precision = ratio(tp, self.predicted(c) as f64);
                let recall = ratio(tp, self.support(c) as f64);
                ratio(2.0 * precision * recall, precision + recall)
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        if self.n_classes == 0 {
            return 0.0;
        }
        self.per_class_f1().iter().sum::<f64>() / self.n_classes as f64
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.n_classes).map(|c| self.true_positives(c)).sum();
        ratio(correct as f64, self.total() as f64)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: preds.len(),
        });
    }
    Ok(())
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    check_pair(preds, labels)?;
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        for index in [p, t] {
            if index >= n_classes {
                return Err(Error::ClassOutOfRange { index, n_classes });
            }
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    Ok(confusion(preds, labels, n_classes)?.macro_f1())
}

/// Fraction of exact matches; 0 for empty input.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(ratio(hits as f64, preds.len() as f64))
}

/// Named scores plus confusion matrix, rendered as TOML with six decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub name: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl EvaluationReport {
    pub fn new(name: impl Into<String>, preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        let confusion = confusion(preds, labels, n_classes)?;
        Ok(EvaluationReport {
            name: name.into(),
            n_samples: preds.len(),
            accuracy: confusion.accuracy(),
            macro_f1: confusion.macro_f1(),
            confusion,
        })
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[{}]", self.name);
        let _ = writeln!(out, "n_samples = {}", self.n_samples);
        let _ = writeln!(out, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(out, "macro_f1 = {:.6}", self.macro_f1);
        let per_class: Vec<String> = self
            .confusion
            .per_class_f1()
            .iter()
            .map(|f| format!("{f:.6}"))
            .collect();
        let _ = writeln!(out, "per_class_f1 = [{}]", per_class.join(", "));
        let _ = writeln!(out, "confusion = [");
        for t in 0..self.confusion.n_classes() {
            let row: Vec<String> = self.confusion.row(t).iter().map(u64::to_string).collect();
            let _ = writeln!(out, "  [{}],", row.join(", "));
        }
        let _ = writeln!(out, "]");
        out
    }
}
