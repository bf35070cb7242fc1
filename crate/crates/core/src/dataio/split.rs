//! Seeded train/validation splits and k-fold assignments.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::AlignedDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// `floor(train_fraction * n)`.
    pub fn train_size(&self, n: usize) -> usize {
        (self.train_fraction * n as f64).floor() as usize
    }
}

/// Random split into (train, validation). Each side stays in sorted-id order.
pub fn split_train_val(dataset: &AlignedDataset, spec: SplitSpec) -> Result<(AlignedDataset, AlignedDataset)> {
    dataset.require_labels()?;
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Empty(format!("cannot split {n} samples")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let n_train = spec.train_size(n);
    if n_train == 0 || n_train == n {
        return Err(Error::Empty(format!(
            "fraction {} of {n} samples leaves one side empty",
            spec.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(spec.seed));
    let (train, val) = order.split_at_mut(n_train);
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(train), dataset.subset(val)))
}

/// Fold index per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_samples: usize,
    pub k: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

impl FoldAssignment {
    /// Rows held out in fold `f`, ascending.
    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        (0..self.n_samples).filter(|&i| self.assignment[i] == f).collect()
    }

    /// Rows outside fold `f`, ascending.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.n_samples).filter(|&i| self.assignment[i] != f).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Assigns each sample to one of `k` folds.
///
/// Samples are shuffled (within each class when stratified, classes taken in
/// ascending order) and dealt round-robin, so fold sizes and per-class fold
/// counts differ by at most one.
pub fn make_folds(labels: &[usize], k: usize, seed: u64, stratified: bool) -> Result<FoldAssignment> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("{k} folds for {n} samples")));
    }
    let mut rng = rng::seeded(seed);
    let order: Vec<usize> = if stratified {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let mut order = Vec::with_capacity(n);
        for members in by_class.values_mut() {
            members.shuffle(&mut rng);
            order.extend_from_slice(members);
        }
        order
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    };
    let mut assignment = vec![0; n];
    for (position, &i) in order.iter().enumerate() {
        assignment[i] = position % k;
    }
    Ok(FoldAssignment {
        n_samples: n,
        k,
        assignment,
        seed,
        stratified,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dataio::{align_modalities, Keyed, ModalitySources};

    fn labeled(n: usize) -> AlignedDataset {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:06}")).collect();
        align_modalities(
            ModalitySources {
                labels: Some(Keyed {
                    ids,
                    values: (0..n).map(|i| i % 3).collect(),
                }),
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn floor_sizes() {
        let spec = SplitSpec::default();
        assert_eq!(spec.train_size(84_916), 76_424);
        assert_eq!(84_916 - spec.train_size(84_916), 8_492);
        let (tr, va) = split_train_val(&labeled(10), spec).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 1));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let ds = labeled(100);
        let spec = SplitSpec { train_fraction: 0.9, seed: 7 };
        let (tr, va) = split_train_val(&ds, spec).unwrap();
        let (tr2, va2) = split_train_val(&ds, spec).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        let mut all: Vec<&String> = tr.ids().iter().chain(va.ids()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert!(tr.ids().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_errors() {
        assert!(split_train_val(&labeled(1), SplitSpec::default()).is_err());
        let bad = SplitSpec { train_fraction: 1.0, seed: 0 };
        assert!(split_train_val(&labeled(10), bad).is_err());
    }

    #[test]
    fn fold_examples() {
        let f = make_folds(&[0; 8], 4, 1, false).unwrap();
        assert_eq!(f.fold_sizes(), vec![2, 2, 2, 2]);

        let f = make_folds(&[0, 0, 0, 0, 1, 1, 1, 1], 4, 3, true).unwrap();
        for fold in 0..4 {
            let members = f.test_indices(fold);
            assert_eq!(members.len(), 2);
            assert_eq!(members.iter().filter(|&&i| i < 4).count(), 1);
        }

        let f = make_folds(&[0; 10], 4, 5, false).unwrap();
        let mut sizes = f.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn policy_fold_sizes_on_validation_split() {
        // 8 folds over the 8,492-sample validation split.
        let labels: Vec<usize> = (0..8_492).map(|i| i % 27).collect();
        let f = make_folds(&labels, 8, 0, true).unwrap();
        let sizes = f.fold_sizes();
        assert_eq!(sizes.iter().filter(|&&s| s == 1062).count(), 4);
        assert_eq!(sizes.iter().filter(|&&s| s == 1061).count(), 4);
    }

    #[test]
    fn fold_errors() {
        assert!(make_folds(&[0, 1], 3, 0, false).is_err());
        assert!(make_folds(&[0, 1], 1, 0, false).is_err());
    }

    proptest! {
        #[test]
        fn folds_balanced(labels in prop::collection::vec(0usize..5, 2..300), k in 2usize..10, seed: u64, stratified: bool) {
            prop_assume!(k <= labels.len());
            let f = make_folds(&labels, k, seed, stratified).unwrap();
            let sizes = f.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            if stratified {
                for class in 0..5 {
                    let mut per = vec![0usize; k];
                    for (i, &y) in labels.iter().enumerate() {
                        if y == class { per[f.assignment[i]] += 1; }
                    }
                    prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
                }
            }
            prop_assert_eq!(f, make_folds(&labels, k, seed, stratified).unwrap());
        }
    }
}
