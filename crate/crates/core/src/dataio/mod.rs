//! Datasets, file formats, deterministic splits and folds, text cleanup.

mod csvio;
mod split;
mod text;

use std::collections::{BTreeMap, HashSet};

pub use csvio::{
    load_features, load_id_list, load_labels, load_predictions, load_probability_matrix, save_features,
    save_id_list, save_labels, save_probability_matrix,
};
pub use split::{make_folds, split_train_val, FoldAssignment, SplitSpec};
pub use text::clean_text;

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};

/// Row sums must be within this distance of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// File rows off by more than [`ROW_SUM_TOLERANCE`] but within this are renormalized on load.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-4;

// Absorbs the rounding of the sum itself so that a row printed as summing to
// exactly 1 - tol is accepted.
pub(crate) fn within(deviation: f64, tolerance: f64) -> bool {
    deviation <= tolerance * (1.0 + 1e-9)
}

/// Row-stochastic N x C matrix of per-sample class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix(Matrix);

impl ProbabilityMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        for (i, row) in matrix.iter_rows().enumerate() {
            check_row(i, row, ROW_SUM_TOLERANCE)?;
        }
        Ok(ProbabilityMatrix(matrix))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Wraps rows produced by a softmax, which sum to 1 by construction.
    pub(crate) fn from_normalized(matrix: Matrix) -> Self {
        debug_assert!(matrix
            .iter_rows()
            .enumerate()
            .all(|(i, r)| check_row(i, r, ROW_SUM_TOLERANCE).is_ok()));
        ProbabilityMatrix(matrix)
    }

    pub fn n_samples(&self) -> usize {
        self.0.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Most probable class per row (smallest index on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        ProbabilityMatrix(self.0.select_rows(indices))
    }
}

pub(crate) fn check_row(i: usize, row: &[f64], tolerance: f64) -> Result<f64> {
    let bad = |reason: String| Error::InvalidProbabilities { row: i, reason };
    if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(bad(format!("entry {v} is not a finite non-negative number")));
    }
    let sum: f64 = row.iter().sum();
    if !within((sum - 1.0).abs(), tolerance) {
        return Err(bad(format!("row sums to {sum}")));
    }
    Ok(sum)
}

/// Values paired with the sample ids of their rows, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyed<T> {
    pub ids: Vec<String>,
    pub values: T,
}

/// Everything needed to build an [`AlignedDataset`].
#[derive(Debug, Clone, Default)]
pub struct ModalitySources {
    pub probabilities: Vec<(String, Keyed<ProbabilityMatrix>)>,
    pub features: Vec<(String, Keyed<Matrix>)>,
    pub labels: Option<Keyed<Vec<usize>>>,
}

/// Samples sorted by id with labels and per-modality matrices row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    n_classes: usize,
    ids: Vec<String>,
    labels: Option<Vec<usize>>,
    probabilities: BTreeMap<String, ProbabilityMatrix>,
    features: BTreeMap<String, Matrix>,
}

impl AlignedDataset {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::Config("dataset has no labels".into()))
    }

    /// Probability matrices keyed by modality, iterated in lexicographic order.
    pub fn probabilities(&self) -> &BTreeMap<String, ProbabilityMatrix> {
        &self.probabilities
    }

    pub fn features(&self) -> &BTreeMap<String, Matrix> {
        &self.features
    }

    /// Union of modality names in lexicographic order.
    pub fn modality_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .probabilities
            .keys()
            .chain(self.features.keys())
            .map(String::as_str)
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Rows at `indices`, kept in the given order.
    pub fn subset(&self, indices: &[usize]) -> AlignedDataset {
        AlignedDataset {
            n_classes: self.n_classes,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            probabilities: self
                .probabilities
                .iter()
                .map(|(k, m)| (k.clone(), m.select_rows(indices)))
                .collect(),
            features: self
                .features
                .iter()
                .map(|(k, m)| (k.clone(), m.select_rows(indices)))
                .collect(),
        }
    }

    /// Drops every sample whose id is in `removed`.
    pub fn without_ids(&self, removed: &HashSet<&str>) -> AlignedDataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !removed.contains(self.ids[i].as_str()))
            .collect();
        self.subset(&keep)
    }

    /// Decomposes the dataset back into sources.
    pub fn to_sources(&self) -> ModalitySources {
        ModalitySources {
            probabilities: self
                .probabilities
                .iter()
                .map(|(k, m)| {
                    (
                        k.clone(),
                        Keyed {
                            ids: self.ids.clone(),
                            values: m.clone(),
                        },
                    )
                })
                .collect(),
            features: self
                .features
                .iter()
                .map(|(k, m)| {
                    (
                        k.clone(),
                        Keyed {
                            ids: self.ids.clone(),
                            values: m.clone(),
                        },
                    )
                })
                .collect(),
            labels: self.labels.as_ref().map(|l| Keyed {
                ids: self.ids.clone(),
                values: l.clone(),
            }),
        }
    }
}

/// Reorders every source to sorted-id order and checks they cover the same ids.
pub fn align_modalities(sources: ModalitySources, n_classes: usize) -> Result<AlignedDataset> {
    if n_classes == 0 {
        return Err(Error::Config("n_classes must be at least 1".into()));
    }

    let mut id_lists: Vec<(String, &[String])> = Vec::new();
    if let Some(labels) = &sources.labels {
        id_lists.push(("labels".into(), &labels.ids));
    }
    for (name, keyed) in &sources.probabilities {
        id_lists.push((format!("{name} probabilities"), &keyed.ids));
    }
    for (name, keyed) in &sources.features {
        id_lists.push((format!("{name} features"), &keyed.ids));
    }
    let Some((reference_name, reference)) = id_lists.first() else {
        return Err(Error::Empty("no modalities or labels supplied".into()));
    };

    let mut ids: Vec<String> = reference.to_vec();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateId(w[0].clone()));
    }

    // Permutation taking each source's file order to sorted order.
    let order_for = |source_name: &str, source_ids: &[String]| -> Result<Vec<usize>> {
        let mut positions: Vec<usize> = (0..source_ids.len()).collect();
        positions.sort_unstable_by(|&a, &b| source_ids[a].cmp(&source_ids[b]));
        for w in positions.windows(2) {
            if source_ids[w[0]] == source_ids[w[1]] {
                return Err(Error::DuplicateId(source_ids[w[0]].clone()));
            }
        }
        let mut sorted = positions.iter().map(|&p| &source_ids[p]);
        for want in &ids {
            match sorted.next() {
                Some(got) if got == want => {}
                Some(got) if got < want => {
                    return Err(Error::MissingId {
                        id: got.clone(),
                        source_name: reference_name.clone(),
                    })
                }
                _ => {
                    return Err(Error::MissingId {
                        id: want.clone(),
                        source_name: source_name.to_string(),
                    })
                }
            }
        }
        if let Some(extra) = sorted.next() {
            return Err(Error::MissingId {
                id: extra.clone(),
                source_name: reference_name.clone(),
            });
        }
        Ok(positions)
    };

    let labels = match &sources.labels {
        Some(keyed) => {
            if keyed.ids.len() != keyed.values.len() {
                return Err(Error::LengthMismatch {
                    expected: keyed.ids.len(),
                    actual: keyed.values.len(),
                });
            }
            let order = order_for("labels", &keyed.ids)?;
            let labels: Vec<usize> = order.iter().map(|&p| keyed.values[p]).collect();
            if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::ClassOutOfRange {
                    index: bad,
                    n_classes,
                });
            }
            Some(labels)
        }
        None => None,
    };

    let mut probabilities = BTreeMap::new();
    for (name, keyed) in &sources.probabilities {
        if keyed.values.n_classes() != n_classes {
            return Err(Error::Dimension(format!(
                "modality {name} has {} classes, expected {n_classes}",
                keyed.values.n_classes()
            )));
        }
        check_keyed_len(&keyed.ids, keyed.values.n_samples())?;
        let order = order_for(&format!("{name} probabilities"), &keyed.ids)?;
        if probabilities
            .insert(name.clone(), keyed.values.select_rows(&order))
            .is_some()
        {
            return Err(Error::Config(format!("modality {name} given twice")));
        }
    }

    let mut features = BTreeMap::new();
    for (name, keyed) in &sources.features {
        check_keyed_len(&keyed.ids, keyed.values.rows())?;
        let order = order_for(&format!("{name} features"), &keyed.ids)?;
        if features
            .insert(name.clone(), keyed.values.select_rows(&order))
            .is_some()
        {
            return Err(Error::Config(format!("modality {name} given twice")));
        }
    }

    Ok(AlignedDataset {
        n_classes,
        ids,
        labels,
        probabilities,
        features,
    })
}

fn check_keyed_len(ids: &[String], rows: usize) -> Result<()> {
    if ids.len() != rows {
        return Err(Error::LengthMismatch {
            expected: ids.len(),
            actual: rows,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keyed_probs(ids: &[&str], rows: &[[f64; 2]]) -> Keyed<ProbabilityMatrix> {
        Keyed {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            values: ProbabilityMatrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn probability_rows_validated() {
        assert!(ProbabilityMatrix::from_rows(&[[0.5, 0.5]]).is_ok());
        assert!(ProbabilityMatrix::from_rows(&[[0.5, 0.6]]).is_err());
        assert!(ProbabilityMatrix::from_rows(&[[1.5, -0.5]]).is_err());
        assert!(ProbabilityMatrix::from_rows(&[[f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn reorders_modalities_to_sorted_ids() {
        let sources = ModalitySources {
            probabilities: vec![
                ("text".into(), keyed_probs(&["a", "b"], &[[1.0, 0.0], [0.0, 1.0]])),
                ("image".into(), keyed_probs(&["b", "a"], &[[0.0, 1.0], [1.0, 0.0]])),
            ],
            ..Default::default()
        };
        let ds = align_modalities(sources, 2).unwrap();
        assert_eq!(ds.ids(), &["a", "b"]);
        for m in ds.probabilities().values() {
            assert_eq!(m.row(0), &[1.0, 0.0]);
        }
        assert_eq!(ds.modality_names(), vec!["image", "text"]);
    }

    #[test]
    fn missing_id_rejected() {
        let sources = ModalitySources {
            probabilities: vec![
                ("text".into(), keyed_probs(&["a", "b"], &[[1.0, 0.0], [0.0, 1.0]])),
                ("image".into(), keyed_probs(&["a"], &[[1.0, 0.0]])),
            ],
            ..Default::default()
        };
        match align_modalities(sources, 2) {
            Err(Error::MissingId { id, .. }) => assert_eq!(id, "b"),
            other => panic!("expected missing id, got {other:?}"),
        }
    }

    #[test]
    fn extra_id_rejected() {
        let sources = ModalitySources {
            probabilities: vec![
                ("image".into(), keyed_probs(&["a"], &[[1.0, 0.0]])),
                ("text".into(), keyed_probs(&["a", "b"], &[[1.0, 0.0], [0.0, 1.0]])),
            ],
            ..Default::default()
        };
        assert!(matches!(
            align_modalities(sources, 2),
            Err(Error::MissingId { .. })
        ));
    }

    #[test]
    fn duplicate_id_rejected() {
        let sources = ModalitySources {
            probabilities: vec![(
                "text".into(),
                keyed_probs(&["a", "a"], &[[1.0, 0.0], [0.0, 1.0]]),
            )],
            ..Default::default()
        };
        assert!(matches!(
            align_modalities(sources, 2),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn single_modality_is_identity() {
        let sources = ModalitySources {
            probabilities: vec![("text".into(), keyed_probs(&["x", "y"], &[[0.3, 0.7], [0.6, 0.4]]))],
            labels: Some(Keyed {
                ids: vec!["y".into(), "x".into()],
                values: vec![0, 1],
            }),
            ..Default::default()
        };
        let ds = align_modalities(sources, 2).unwrap();
        assert_eq!(ds.labels(), Some(&[1, 0][..]));
        assert_eq!(ds.probabilities()["text"].row(0), &[0.3, 0.7]);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let sources = ModalitySources {
            labels: Some(Keyed {
                ids: vec!["a".into()],
                values: vec![5],
            }),
            ..Default::default()
        };
        assert!(matches!(
            align_modalities(sources, 2),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn realigning_is_a_no_op() {
        let sources = ModalitySources {
            probabilities: vec![("t".into(), keyed_probs(&["b", "a", "c"], &[[0.1, 0.9], [0.2, 0.8], [0.3, 0.7]]))],
            features: vec![(
                "t".into(),
                Keyed {
                    ids: vec!["c".into(), "a".into(), "b".into()],
                    values: Matrix::from_rows(&[[3.0], [1.0], [2.0]]).unwrap(),
                },
            )],
            labels: None,
        };
        let once = align_modalities(sources, 2).unwrap();
        let twice = align_modalities(once.to_sources(), 2).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.features()["t"].as_slice(), &[1.0, 2.0, 3.0]);
    }
}
