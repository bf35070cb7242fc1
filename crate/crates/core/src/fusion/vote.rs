use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataio::ProbabilityMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Outcome of one majority vote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteResult {
    pub winner: usize,
    /// Votes per class; sums to the number of members.
    pub counts: Vec<u32>,
    /// More than one class shared the top count.
    pub tie_broken: bool,
}

impl VoteResult {
    pub fn votes_for_winner(&self) -> u32 {
        self.counts[self.winner]
    }
}

/// Most frequent class among `votes`. Ties go to the tied class with the
/// highest mean predicted probability, then to the smallest class index.
pub fn majority_vote(votes: &[usize], mean_probs: &[f64]) -> Result<VoteResult> {
    if votes.is_empty() {
        return Err(Error::Empty("vote row".into()));
    }
    let c = mean_probs.len();
    let mut counts = vec![0u32; c];
    for &v in votes {
        if v >= c {
            return Err(Error::ClassOutOfRange { index: v, n_classes: c });
        }
        counts[v] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..c).filter(|&k| counts[k] == top).collect();
    let mut winner = tied[0];
    for &k in &tied[1..] {
        if mean_probs[k] > mean_probs[winner] {
            winner = k;
        }
    }
    Ok(VoteResult {
        winner,
        counts,
        tie_broken: tied.len() > 1,
    })
}

/// Per-sample mean of the members' probability rows.
///
/// Each entry sums the member values in sorted order, so the result does not
/// depend on member order down to the last bit.
pub fn mean_probabilities(members: &[&ProbabilityMatrix]) -> Result<ProbabilityMatrix> {
    let first = members.first().ok_or_else(|| Error::Empty("ensemble members".into()))?;
    let (n, c) = (first.n_samples(), first.n_classes());
    if let Some(bad) = members.iter().find(|m| m.n_samples() != n || m.n_classes() != c) {
        return Err(Error::Dimension(format!(
            "member output {}x{} differs from {n}x{c}",
            bad.n_samples(),
            bad.n_classes()
        )));
    }
    let mut out = Matrix::zeros(n, c);
    let mut column = Vec::with_capacity(members.len());
    for i in 0..n {
        for k in 0..c {
            column.clear();
            column.extend(members.iter().map(|m| m.row(i)[k]));
            column.sort_by(f64::total_cmp);
            out.row_mut(i)[k] = column.iter().sum::<f64>() / members.len() as f64;
        }
    }
    ProbabilityMatrix::new(out)
}

/// Voted labels, vote details and the averaged member probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub labels: Vec<usize>,
    pub votes: Vec<VoteResult>,
    pub mean_probs: ProbabilityMatrix,
}

impl EnsemblePrediction {
    /// Votes each sample across members given their labels and probabilities.
    pub fn from_members(member_labels: &[&[usize]], member_probs: &[&ProbabilityMatrix]) -> Result<Self> {
        if member_labels.len() != member_probs.len() {
            return Err(Error::LengthMismatch {
                expected: member_probs.len(),
                actual: member_labels.len(),
            });
        }
        let mean_probs = mean_probabilities(member_probs)?;
        let n = mean_probs.n_samples();
        if let Some(bad) = member_labels.iter().find(|l| l.len() != n) {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: bad.len(),
            });
        }
        let mut row = Vec::with_capacity(member_labels.len());
        let votes = (0..n)
            .map(|i| {
                row.clear();
                row.extend(member_labels.iter().map(|l| l[i]));
                majority_vote(&row, mean_probs.row(i))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsemblePrediction {
            labels: votes.iter().map(|v| v.winner).collect(),
            votes,
            mean_probs,
        })
    }

    /// `id,predicted_label,votes_for_winner,tie_broken`.
    pub fn save_csv(&self, path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
        let path = path.as_ref();
        if ids.len() != self.labels.len() {
            return Err(Error::LengthMismatch {
                expected: self.labels.len(),
                actual: ids.len(),
            });
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "id,predicted_label,votes_for_winner,tie_broken").map_err(io)?;
        for (id, v) in ids.iter().zip(&self.votes) {
            writeln!(w, "{id},{},{},{}", v.winner, v.votes_for_winner(), v.tie_broken).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Majority vote across whole pipeline variants, each contributing its
/// predicted labels and mean class probabilities.
pub fn pipeline_ensemble(variants: &[&EnsemblePrediction]) -> Result<EnsemblePrediction> {
    if variants.is_empty() {
        return Err(Error::Empty("pipeline variants".into()));
    }
    let labels: Vec<&[usize]> = variants.iter().map(|v| v.labels.as_slice()).collect();
    let probs: Vec<&ProbabilityMatrix> = variants.iter().map(|v| &v.mean_probs).collect();
    EnsemblePrediction::from_members(&labels, &probs)
}
