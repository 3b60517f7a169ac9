//! Seeded stratified k-fold splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::Dataset;

/// Split `dataset` into `folds` stratified (train, test) index pairs.
///
/// Per class, indices are shuffled by a ChaCha stream seeded with `seed`
/// and dealt round-robin, so per-class counts across folds differ by at
/// most one and the same seed always produces the same split.
pub fn stratified_kfold(
    dataset: &Dataset,
    folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    stratified_kfold_labels(&dataset.labels(), folds, seed)
}

pub fn stratified_kfold_labels(
    labels: &[usize],
    folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::Config(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (idx, &label) in labels.iter().enumerate() {
        by_class[label].push(idx);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < folds {
            return Err(Error::Stratification {
                class,
                members: members.len(),
                folds,
            });
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); folds];
    // Rotating the starting fold between classes keeps the aggregate fold
    // sizes balanced, not just the per-class counts.
    let mut start = 0usize;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for (pos, &idx) in members.iter().enumerate() {
            fold_members[(start + pos) % folds].push(idx);
        }
        start = (start + members.len()) % folds;
    }
    for members in &mut fold_members {
        members.sort_unstable();
    }

    let splits = (0..folds)
        .map(|f| {
            let test = fold_members[f].clone();
            let mut train: Vec<usize> = fold_members
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, m)| m.iter().copied())
                .collect();
            train.sort_unstable();
            (train, test)
        })
        .collect();
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_classes_split_evenly() {
        // 10 samples, 2 balanced classes, 5 folds -> one of each per fold.
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let splits = stratified_kfold_labels(&labels, 5, 42).unwrap();
        assert_eq!(splits.len(), 5);
        for (train, test) in &splits {
            assert_eq!(test.len(), 2);
            assert_eq!(train.len(), 8);
            let test_classes: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            assert!(test_classes.contains(&0) && test_classes.contains(&1));
        }
    }

    #[test]
    fn folds_partition_the_index_set() {
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 1];
        let splits = stratified_kfold_labels(&labels, 3, 7).unwrap();
        let mut all_test: Vec<usize> = splits.iter().flat_map(|(_, t)| t.clone()).collect();
        all_test.sort_unstable();
        let expected: Vec<usize> = (0..labels.len()).collect();
        assert_eq!(all_test, expected, "test folds partition the indices");
        for (train, test) in &splits {
            assert!(test.iter().all(|i| !train.contains(i)));
            assert_eq!(train.len() + test.len(), labels.len());
        }
    }

    #[test]
    fn per_class_counts_differ_by_at_most_one() {
        let labels: Vec<usize> = (0..23).map(|i| i % 2).collect();
        let splits = stratified_kfold_labels(&labels, 4, 9).unwrap();
        for class in 0..2 {
            let counts: Vec<usize> = splits
                .iter()
                .map(|(_, t)| t.iter().filter(|&&i| labels[i] == class).count())
                .collect();
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            assert!(max - min <= 1, "class {class}: {counts:?}");
        }
    }

    #[test]
    fn same_seed_same_split() {
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let a = stratified_kfold_labels(&labels, 10, 5).unwrap();
        let b = stratified_kfold_labels(&labels, 10, 5).unwrap();
        assert_eq!(a, b);
        let c = stratified_kfold_labels(&labels, 10, 6).unwrap();
        assert_ne!(a, c, "different seed shuffles differently");
    }

    #[test]
    fn small_class_is_rejected_by_name() {
        let labels = vec![0, 0, 0, 0, 1];
        let err = stratified_kfold_labels(&labels, 2, 1).unwrap_err();
        match err {
            Error::Stratification { class, members, folds } => {
                assert_eq!((class, members, folds), (1, 1, 2));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
