use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vote::EnsemblePrediction;
use crate::dataio::{make_folds, AlignedDataset, FoldAssignment, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{load_checkpoint, save_checkpoint, train, LabeledData, Network, NetworkLayout, TrainConfig, TrainedModel};

/// Per-modality probability rows concatenated in modality order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub modality_order: Vec<String>,
    pub n_classes: usize,
    /// N x (M * C).
    pub vectors: Matrix,
}

impl FusionInput {
    pub fn input_dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn select_rows(&self, indices: &[usize]) -> FusionInput {
        FusionInput {
            modality_order: self.modality_order.clone(),
            n_classes: self.n_classes,
            vectors: self.vectors.select_rows(indices),
        }
    }
}

/// Concatenates every modality's probability rows in lexicographic modality order.
pub fn assemble_fusion_input(dataset: &AlignedDataset) -> Result<FusionInput> {
    let names = dataset.modality_names();
    if names.is_empty() {
        return Err(Error::Empty("dataset has no modalities".into()));
    }
    let mut parts = Vec::with_capacity(names.len());
    for name in &names {
        let probs = dataset.probabilities().get(*name).ok_or_else(|| {
            Error::Config(format!("modality {name:?} has no class probabilities"))
        })?;
        parts.push(probs.as_matrix());
    }
    Ok(FusionInput {
        modality_order: names.iter().map(|s| s.to_string()).collect(),
        n_classes: dataset.n_classes(),
        vectors: Matrix::hstack(&parts)?,
    })
}

/// Settings for k-fold policy training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub folds: usize,
    pub hidden_dim: Option<usize>,
    pub train: TrainConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            folds: 8,
            hidden_dim: Some(NetworkLayout::DEFAULT_HIDDEN),
            train: TrainConfig::default(),
        }
    }
}

/// K policy networks, one per fold, voted at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEnsemble {
    pub members: Vec<TrainedModel>,
    pub folds: FoldAssignment,
    pub modality_order: Vec<String>,
    pub layout: NetworkLayout,
}

/// Trains one policy network per fold on the other folds, checkpointing on
/// macro-F1 of the held-out fold. Member `f` uses init seed `seed + 1 + f`
/// and shuffle seed `seed + 1001 + f`; folds are stratified with `seed`.
pub fn train_policy_ensemble(
    input: &FusionInput,
    labels: &[usize],
    config: &PolicyConfig,
    seed: u64,
) -> Result<PolicyEnsemble> {
    if input.vectors.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: input.vectors.rows(),
            actual: labels.len(),
        });
    }
    let folds = make_folds(labels, config.folds, seed, true)?;
    let c = input.n_classes;
    let mut present = vec![false; c];
    for &y in labels {
        if y >= c {
            return Err(Error::ClassOutOfRange { index: y, n_classes: c });
        }
        present[y] = true;
    }
    for f in 0..folds.k {
        let mut seen = vec![false; c];
        for i in folds.train_indices(f) {
            seen[labels[i]] = true;
        }
        if let Some(class) = (0..c).find(|&k| present[k] && !seen[k]) {
            let count = labels.iter().filter(|&&y| y == class).count();
            return Err(Error::SparseClass {
                class,
                count,
                required: 2,
            });
        }
    }

    let layout = NetworkLayout::with_hidden(input.input_dim(), config.hidden_dim, c);
    let members = (0..folds.k)
        .into_par_iter()
        .map(|f| -> Result<TrainedModel> {
            let (tr, va) = (folds.train_indices(f), folds.test_indices(f));
            let (tx, vx) = (input.vectors.select_rows(&tr), input.vectors.select_rows(&va));
            let ty: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
            let vy: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
            let train_config = TrainConfig {
                shuffle_seed: seed.wrapping_add(1001 + f as u64),
                ..config.train
            };
            let net = Network::init(layout, seed.wrapping_add(1 + f as u64))?;
            train(net, LabeledData::new(&tx, &ty)?, LabeledData::new(&vx, &vy)?, &train_config)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PolicyEnsemble {
        members,
        folds,
        modality_order: input.modality_order.clone(),
        layout,
    })
}

impl PolicyEnsemble {
    pub fn n_classes(&self) -> usize {
        self.layout.output_dim
    }

    /// Per-member class probabilities, in member order.
    pub fn member_probabilities(&self, input: &FusionInput) -> Result<Vec<ProbabilityMatrix>> {
        if input.modality_order != self.modality_order {
            return Err(Error::Dimension(format!(
                "ensemble expects modalities {:?}, got {:?}",
                self.modality_order, input.modality_order
            )));
        }
        if input.input_dim() != self.layout.input_dim {
            return Err(Error::Dimension(format!(
                "ensemble expects {} inputs, got {}",
                self.layout.input_dim,
                input.input_dim()
            )));
        }
        self.members
            .par_iter()
            .map(|m| m.best_network.forward(&input.vectors))
            .collect()
    }
}

/// Each member's argmax, combined by majority vote.
pub fn policy_predict(ensemble: &PolicyEnsemble, input: &FusionInput) -> Result<EnsemblePrediction> {
    let probs = ensemble.member_probabilities(input)?;
    let labels: Vec<Vec<usize>> = probs.iter().map(ProbabilityMatrix::argmax_rows).collect();
    let label_refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
    let prob_refs: Vec<&ProbabilityMatrix> = probs.iter().collect();
    EnsemblePrediction::from_members(&label_refs, &prob_refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnsembleManifest {
    modality_order: Vec<String>,
    layout: NetworkLayout,
    folds: FoldAssignment,
    members: Vec<String>,
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.toml";

/// Writes `ensemble.toml` plus one checkpoint per member into `dir`.
pub fn save_ensemble(dir: impl AsRef<Path>, ensemble: &PolicyEnsemble) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut members = Vec::with_capacity(ensemble.members.len());
    for (f, m) in ensemble.members.iter().enumerate() {
        let name = format!("member_{f}.json");
        save_checkpoint(dir.join(&name), m)?;
        members.push(name);
    }
    let manifest = EnsembleManifest {
        modality_order: ensemble.modality_order.clone(),
        layout: ensemble.layout,
        folds: ensemble.folds.clone(),
        members,
    };
    let path = dir.join(ENSEMBLE_MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads an ensemble from a directory containing `ensemble.toml`, or from the manifest path itself.
pub fn load_ensemble(path: impl AsRef<Path>) -> Result<PolicyEnsemble> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(ENSEMBLE_MANIFEST)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: EnsembleManifest =
        toml::from_str(&text).map_err(|e| Error::parse(&manifest_path, e))?;
    let members = manifest
        .members
        .iter()
        .map(|m| load_checkpoint(dir.join(m)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = members.iter().find(|m| *m.best_network.layout() != manifest.layout) {
        return Err(Error::Dimension(format!(
            "member layout {:?} differs from ensemble layout",
            bad.best_network.layout()
        )));
    }
    Ok(PolicyEnsemble {
        members,
        folds: manifest.folds,
        modality_order: manifest.modality_order,
        layout: manifest.layout,
    })
}
