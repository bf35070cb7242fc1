//! Confident-learning label-noise detection and pruning.
//!
//! Out-of-fold probabilities give per-class thresholds `t_j` (mean predicted
//! probability of class `j` over samples labeled `j`). A sample is confidently
//! assigned to the most probable class among those reaching their threshold.
//! Samples assigned away from their given label are candidates, ranked by
//! self-confidence (probability of the given label), lowest first.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{make_folds, AlignedDataset, FoldAssignment, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{train, LabeledData, Network, NetworkLayout, TrainConfig, TrainedModel};

/// Classifier trained on each fold complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseClassifier {
    pub hidden_dim: Option<usize>,
    pub config: TrainConfig,
}

impl Default for BaseClassifier {
    fn default() -> Self {
        BaseClassifier {
            hidden_dim: None,
            config: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

/// Out-of-fold probabilities and the fold models that produced them.
#[derive(Debug, Clone)]
pub struct OutOfFold {
    pub probabilities: ProbabilityMatrix,
    pub folds: FoldAssignment,
    pub models: Vec<TrainedModel>,
}

/// Predicts every row with a model trained on the other `k - 1` folds.
///
/// Folds are stratified. Fold `f` uses init seed `seed + 1 + f` and shuffle
/// seed `seed + 1001 + f`; checkpoints are selected on the fold's own training
/// rows so no held-out label influences its prediction.
pub fn cross_val_probabilities(
    features: &Matrix,
    labels: &[usize],
    n_classes: usize,
    k: usize,
    base: &BaseClassifier,
    seed: u64,
) -> Result<OutOfFold> {
    if features.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(Error::ClassOutOfRange { index: y, n_classes });
        }
        counts[y] += 1;
    }
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c > 0 && c < k) {
        return Err(Error::SparseClass {
            class,
            count,
            required: k,
        });
    }
    let folds = make_folds(labels, k, seed, true)?;
    let layout = NetworkLayout::with_hidden(features.cols(), base.hidden_dim, n_classes);

    let per_fold: Vec<(Vec<usize>, TrainedModel, ProbabilityMatrix)> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<_> {
            let train_idx = folds.train_indices(f);
            let test_idx = folds.test_indices(f);
            let x = features.select_rows(&train_idx);
            let y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
            let data = LabeledData::new(&x, &y)?;
            let config = TrainConfig {
                shuffle_seed: seed.wrapping_add(1001 + f as u64),
                ..base.config
            };
            let net = Network::init(layout, seed.wrapping_add(1 + f as u64))?;
            let model = train(net, data, data, &config)?;
            let probs = model.best_network.forward(&features.select_rows(&test_idx))?;
            Ok((test_idx, model, probs))
        })
        .collect::<Result<_>>()?;

    let mut out = Matrix::zeros(labels.len(), n_classes);
    let mut models = Vec::with_capacity(k);
    for (test_idx, model, probs) in per_fold {
        for (r, &i) in test_idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(probs.row(r));
        }
        models.push(model);
    }
    Ok(OutOfFold {
        probabilities: ProbabilityMatrix::new(out)?,
        folds,
        models,
    })
}

fn check_labels(probs: &ProbabilityMatrix, labels: &[usize]) -> Result<()> {
    if probs.n_samples() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: probs.n_samples(),
            actual: labels.len(),
        });
    }
    if let Some(&index) = labels.iter().find(|&&y| y >= probs.n_classes()) {
        return Err(Error::ClassOutOfRange {
            index,
            n_classes: probs.n_classes(),
        });
    }
    Ok(())
}

/// `t_j` = mean of `p(j | x)` over samples labeled `j`.
pub fn class_thresholds(probs: &ProbabilityMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(probs, labels)?;
    let c = probs.n_classes();
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        sums[y] += probs.row(i)[y];
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::SparseClass {
            class,
            count: 0,
            required: 1,
        });
    }
    Ok(sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect())
}

/// Counts of (given label, confidently assigned class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidentJoint {
    n_classes: usize,
    counts: Vec<u64>,
    pub skipped: usize,
    /// Per sample; `None` when no class reached its threshold.
    pub assigned: Vec<Option<usize>>,
}

impl ConfidentJoint {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, given: usize, assigned: usize) -> u64 {
        self.counts[given * self.n_classes + assigned]
    }

    pub fn row(&self, given: usize) -> &[u64] {
        &self.counts[given * self.n_classes..(given + 1) * self.n_classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn off_diagonal(&self) -> u64 {
        self.total() - (0..self.n_classes).map(|j| self.get(j, j)).sum::<u64>()
    }
}

/// Builds the confident joint. The threshold test is inclusive and the
/// argmax over candidate classes breaks ties toward the smallest index.
pub fn confident_joint(probs: &ProbabilityMatrix, labels: &[usize], thresholds: &[f64]) -> Result<ConfidentJoint> {
    check_labels(probs, labels)?;
    let c = probs.n_classes();
    if thresholds.len() != c {
        return Err(Error::LengthMismatch {
            expected: c,
            actual: thresholds.len(),
        });
    }
    let mut counts = vec![0u64; c * c];
    let mut skipped = 0;
    let assigned: Vec<Option<usize>> = labels
        .iter()
        .enumerate()
        .map(|(i, &given)| {
            let row = probs.row(i);
            let mut best: Option<usize> = None;
            for k in 0..c {
                if row[k] >= thresholds[k] && best.is_none_or(|b| row[k] > row[b]) {
                    best = Some(k);
                }
            }
            match best {
                Some(k) => counts[given * c + k] += 1,
                None => skipped += 1,
            }
            best
        })
        .collect();
    Ok(ConfidentJoint {
        n_classes: c,
        counts,
        skipped,
        assigned,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    /// Row in the dataset the report was built from.
    pub index: usize,
    pub given_label: usize,
    pub assigned_label: usize,
    pub self_confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReport {
    pub thresholds: Vec<f64>,
    pub joint: ConfidentJoint,
    /// Most likely label errors first.
    pub candidates: Vec<Candidate>,
}

/// Collects the off-diagonal samples of `joint`, sorted by ascending
/// self-confidence and then by id.
pub fn rank_label_errors(
    probs: &ProbabilityMatrix,
    labels: &[usize],
    ids: &[String],
    thresholds: Vec<f64>,
    joint: ConfidentJoint,
) -> Result<NoiseReport> {
    check_labels(probs, labels)?;
    if ids.len() != labels.len() || joint.assigned.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: ids.len().min(joint.assigned.len()),
        });
    }
    let mut candidates: Vec<Candidate> = joint
        .assigned
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let assigned = (*a)?;
            (assigned != labels[i]).then(|| Candidate {
                id: ids[i].clone(),
                index: i,
                given_label: labels[i],
                assigned_label: assigned,
                self_confidence: probs.row(i)[labels[i]],
            })
        })
        .collect();
    candidates.sort_by(|a, b| {
        a.self_confidence
            .total_cmp(&b.self_confidence)
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(NoiseReport {
        thresholds,
        joint,
        candidates,
    })
}

/// Thresholds, joint and ranking in one pass.
pub fn find_label_errors(probs: &ProbabilityMatrix, labels: &[usize], ids: &[String]) -> Result<NoiseReport> {
    let thresholds = class_thresholds(probs, labels)?;
    let joint = confident_joint(probs, labels, &thresholds)?;
    rank_label_errors(probs, labels, ids, thresholds, joint)
}

impl NoiseReport {
    /// `rank,id,given_label,assigned_label,self_confidence`, rank starting at 1.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "rank,id,given_label,assigned_label,self_confidence").map_err(io)?;
        for (r, c) in self.candidates.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                r + 1,
                c.id,
                c.given_label,
                c.assigned_label,
                c.self_confidence
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// How many ranked candidates to remove.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneAmount {
    /// `ceil(fraction * candidates)`.
    FractionOfCandidates(f64),
    Count(usize),
}

impl Default for PruneAmount {
    fn default() -> Self {
        PruneAmount::FractionOfCandidates(0.10)
    }
}

impl PruneAmount {
    pub fn budget(&self, n_candidates: usize) -> Result<usize> {
        match *self {
            PruneAmount::FractionOfCandidates(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Config(format!("prune fraction {f} outside [0, 1]")));
                }
                Ok(((f * n_candidates as f64).ceil() as usize).min(n_candidates))
            }
            PruneAmount::Count(n) => Ok(n.min(n_candidates)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub cleaned: AlignedDataset,
    pub removed_ids: Vec<String>,
    /// Candidates inside the budget that were kept because removing them would empty their class.
    pub protected_ids: Vec<String>,
}

/// Removes the top-ranked candidates from `dataset` (matched by id).
pub fn prune_dataset(dataset: &AlignedDataset, report: &NoiseReport, amount: PruneAmount) -> Result<PruneOutcome> {
    let labels = dataset.require_labels()?;
    let budget = amount.budget(report.candidates.len())?;
    let index_of: std::collections::HashMap<&str, usize> =
        dataset.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut remaining = vec![0usize; dataset.n_classes()];
    for &y in labels {
        remaining[y] += 1;
    }
    let mut removed_ids = Vec::new();
    let mut protected_ids = Vec::new();
    for cand in &report.candidates[..budget] {
        let Some(&i) = index_of.get(cand.id.as_str()) else {
            return Err(Error::MissingId {
                id: cand.id.clone(),
                source_name: "dataset being pruned".into(),
            });
        };
        let class = labels[i];
        if remaining[class] <= 1 {
            protected_ids.push(cand.id.clone());
            continue;
        }
        remaining[class] -= 1;
        removed_ids.push(cand.id.clone());
    }
    let removed: HashSet<&str> = removed_ids.iter().map(String::as_str).collect();
    Ok(PruneOutcome {
        cleaned: dataset.without_ids(&removed),
        removed_ids,
        protected_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub folds: usize,
    pub amount: PruneAmount,
    pub base: BaseClassifier,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            folds: 4,
            amount: PruneAmount::default(),
            base: BaseClassifier::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseOutcome {
    pub out_of_fold: OutOfFold,
    pub report: NoiseReport,
    pub prune: PruneOutcome,
}

/// Out-of-fold probabilities from one modality, then ranking and pruning.
/// Uses the modality's feature matrix when present, else its probabilities.
pub fn denoise(dataset: &AlignedDataset, modality: &str, config: &DenoiseConfig, seed: u64) -> Result<DenoiseOutcome> {
    let labels = dataset.require_labels()?;
    let inputs = match (dataset.features().get(modality), dataset.probabilities().get(modality)) {
        (Some(f), _) => f.clone(),
        (None, Some(p)) => p.as_matrix().clone(),
        (None, None) => return Err(Error::Config(format!("unknown modality {modality:?}"))),
    };
    let oof = cross_val_probabilities(&inputs, labels, dataset.n_classes(), config.folds, &config.base, seed)?;
    let report = find_label_errors(&oof.probabilities, labels, dataset.ids())?;
    let prune = prune_dataset(dataset, &report, config.amount)?;
    Ok(DenoiseOutcome {
        out_of_fold: oof,
        report,
        prune,
    })
}
