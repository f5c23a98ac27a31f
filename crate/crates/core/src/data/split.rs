use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Per-class shuffled index lists.
fn shuffled_classes(dataset: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.spec().num_classes()];
    for (i, l) in dataset.labels().into_iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut seed::rng(seed, &[seed::hash_str("split"), c as u64]));
    }
    by_class
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Stratified train/validation/test split.
///
/// Each class with `n` examples contributes `max(1, round(n·r))` examples to
/// validation and to test and the rest to train, so every class appears in
/// every split. Within a split, examples keep their original order.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
    if dataset.len() < 10 {
        return Err(Error::Data(format!("need at least 10 examples to split, got {}", dataset.len())));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    if ratios[1] == 0.0 || ratios[2] == 0.0 {
        return Err(Error::invalid("validation and test splits are required"));
    }
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for (c, idx) in shuffled_classes(dataset, seed).into_iter().enumerate() {
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            return Err(Error::Data(format!(
                "class `{}` has {n} examples; stratifying three ways needs at least 3",
                dataset.spec().labels[c]
            )));
        }
        let n_val = ((n as f64 * ratios[1]).round() as usize).max(1);
        let n_test = ((n as f64 * ratios[2]).round() as usize).max(1);
        if n_val + n_test >= n {
            return Err(Error::Data(format!("class `{}` too small for ratios {ratios:?}", dataset.spec().labels[c])));
        }
        let n_train = n - n_val - n_test;
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    let [tr, va, te] = parts;
    Ok(SplitDataset {
        train: dataset.subset(&sorted(tr))?,
        validation: dataset.subset(&sorted(va))?,
        test: dataset.subset(&sorted(te))?,
        seed,
        ratios,
    })
}

/// Stratified two-way split: `(train, held_out)` with at least one held-out
/// example per class that has two or more examples.
pub fn holdout_split(dataset: &Dataset, held_out_ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < held_out_ratio && held_out_ratio < 1.0) {
        return Err(Error::invalid("held-out ratio must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for idx in shuffled_classes(dataset, seed) {
        let n = idx.len();
        if n < 2 {
            train.extend(idx);
            continue;
        }
        let k = ((n as f64 * held_out_ratio).round() as usize).clamp(1, n - 1);
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    if held.is_empty() {
        return Err(Error::Data(format!("`{}` is too small to hold out examples", dataset.name())));
    }
    Ok((dataset.subset(&sorted(train))?, dataset.subset(&sorted(held))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::multitask::{Granularity, TaskSpec};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dataset(per_class: &[usize]) -> Dataset {
        let labels = ["a", "b", "c", "d"];
        let spec = TaskSpec::new("t", &labels[..per_class.len().max(2)], Granularity::Sentence, None);
        let mut ex = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                ex.push(Example::new(format!("{c}-{i}"), format!("text {i}"), "t", labels[c]));
            }
        }
        Dataset::new(spec, ex).unwrap()
    }

    #[test]
    fn balanced_hundred() {
        let s = split(&dataset(&[50, 50]), DEFAULT_SPLIT_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s.train.class_counts(), [40, 40]);
        assert_eq!(s.validation.class_counts(), [5, 5]);
        assert_eq!(s.test.class_counts(), [5, 5]);
    }

    #[test]
    fn deterministic_per_seed() {
        let d = dataset(&[30, 17]);
        assert_eq!(split(&d, DEFAULT_SPLIT_RATIOS, 4).unwrap(), split(&d, DEFAULT_SPLIT_RATIOS, 4).unwrap());
        assert_ne!(split(&d, DEFAULT_SPLIT_RATIOS, 4).unwrap().test, split(&d, DEFAULT_SPLIT_RATIOS, 5).unwrap().test);
    }

    #[test]
    fn guards() {
        let d = dataset(&[50, 50]);
        assert!(split(&d, [1.0, 0.0, 0.0], 1).is_err());
        assert!(split(&d, [0.5, 0.2, 0.2], 1).is_err());
        assert!(split(&dataset(&[4, 4]), DEFAULT_SPLIT_RATIOS, 1).is_err());
        assert!(split(&dataset(&[20, 2]), DEFAULT_SPLIT_RATIOS, 1).is_err());
    }

    #[test]
    fn holdout_is_partition() {
        let d = dataset(&[9, 21]);
        let (tr, ho) = holdout_split(&d, 0.1, 3).unwrap();
        assert_eq!(tr.len() + ho.len(), 30);
        assert_eq!(ho.class_counts(), [1, 2]);
    }

    proptest! {
        #[test]
        fn split_is_stratified_partition(counts in prop::collection::vec(3usize..60, 2..4), seed in 0u64..1000) {
            prop_assume!(counts.iter().sum::<usize>() >= 10);
            let d = dataset(&counts);
            let s = split(&d, DEFAULT_SPLIT_RATIOS, seed).unwrap();
            let ids = |x: &Dataset| x.examples().iter().map(|e| e.id.clone()).collect::<HashSet<_>>();
            let (a, b, c) = (ids(&s.train), ids(&s.validation), ids(&s.test));
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            prop_assert_eq!(a.len() + b.len() + c.len(), d.len());
            for (part, r) in [(&s.train, 0.8), (&s.validation, 0.1), (&s.test, 0.1)] {
                for (got, n) in part.class_counts().iter().zip(&counts) {
                    let ideal = *n as f64 * r;
                    // forced minimum of one per split can add up to one more
                    prop_assert!((*got as f64 - ideal).abs() <= 1.5, "{got} vs {ideal}");
                }
            }
        }
    }
}
