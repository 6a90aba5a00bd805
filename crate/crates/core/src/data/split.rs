//! Seeded train / validation / test partitioning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AlignedSegment, Dataset};
use crate::train::stream_rng;

pub const TRAIN_FRACTION: f64 = 0.6667;
pub const VALIDATION_FRACTION: f64 = 0.1515;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("split fractions must lie in (0, 1), got train {train} and validation {validation}")]
    Fractions { train: f64, validation: f64 },
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("{n} segments give an empty {which} split (train {train}, validation {validation}, test {test})")]
    EmptySplit {
        n: usize,
        which: &'static str,
        train: usize,
        validation: usize,
        test: usize,
    },
}

/// Segment ids of each partition, each list in ascending id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl DatasetSplit {
    /// The segments of `dataset` in (train, validation, test).
    pub fn select<'a>(&self, dataset: &'a Dataset) -> [Vec<&'a AlignedSegment>; 3] {
        let pick = |ids: &[String]| ids.iter().filter_map(|id| dataset.get(id)).collect();
        [pick(&self.train), pick(&self.validation), pick(&self.test)]
    }
}

/// Half-up rounding that ignores representation error below 1e-9, so that
/// 0.5 written as 0.49999999999 still rounds up.
fn round_half_up(x: f64) -> usize {
    let snapped = (x * 1e9).round() / 1e9;
    (snapped + 0.5).floor() as usize
}

/// `(train, validation, test)` sizes for `n` segments: the train pool is
/// `round(n * train_fraction)`, validation is `round(pool * validation_fraction)`
/// taken from the pool, and the remainder is the test set.
pub fn split_sizes(n: usize, train_fraction: f64, validation_fraction: f64) -> Result<(usize, usize, usize), SplitError> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !(ok(train_fraction) && ok(validation_fraction)) {
        return Err(SplitError::Fractions {
            train: train_fraction,
            validation: validation_fraction,
        });
    }
    if n == 0 {
        return Err(SplitError::EmptyDataset);
    }
    let pool = round_half_up(n as f64 * train_fraction).min(n);
    let validation = round_half_up(pool as f64 * validation_fraction).min(pool);
    let (train, test) = (pool - validation, n - pool);
    for (which, size) in [("train", train), ("validation", validation), ("test", test)] {
        if size == 0 {
            return Err(SplitError::EmptySplit {
                n,
                which,
                train,
                validation,
                test,
            });
        }
    }
    Ok((train, validation, test))
}

pub fn split_dataset(
    dataset: &Dataset,
    train_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, SplitError> {
    let n = dataset.len();
    let (train, validation, _) = split_sizes(n, train_fraction, validation_fraction)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "split", 0));
    let ids = |range: &[usize]| {
        let mut v: Vec<String> = range.iter().map(|&i| dataset.segments[i].id.clone()).collect();
        v.sort();
        v
    };
    Ok(DatasetSplit {
        validation: ids(&order[..validation]),
        train: ids(&order[validation..validation + train]),
        test: ids(&order[validation + train..]),
        seed,
        train_fraction,
        validation_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::segment;
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dataset(n: usize) -> Dataset {
        let mut segments: Vec<_> = (0..n).map(|i| segment(&format!("s{i:04}"), 1)).collect();
        segments.sort_by(|a, b| a.id.cmp(&b.id));
        Dataset { header: None, segments }
    }

    /// Integer form of the default rule: `round(n * 0.6667)` as `(6667 n + 5000) / 10000`.
    fn oracle(n: usize) -> (usize, usize, usize) {
        let pool = (n * 6667 + 5000) / 10000;
        let val = (pool * 1515 + 5000) / 10000;
        (pool - val, val, n - pool)
    }

    #[test]
    fn hundred_segments() {
        assert_eq!(split_sizes(100, TRAIN_FRACTION, VALIDATION_FRACTION).unwrap(), (57, 10, 33));
    }

    #[test]
    fn sizes_follow_rule_for_3_to_500() {
        for n in 3..=500 {
            let (tr, va, te) = oracle(n);
            let got = split_sizes(n, TRAIN_FRACTION, VALIDATION_FRACTION);
            if tr == 0 || va == 0 || te == 0 {
                assert!(matches!(got, Err(SplitError::EmptySplit { .. })), "n={n}");
            } else {
                assert_eq!(got.unwrap(), (tr, va, te), "n={n}");
            }
        }
    }

    #[test]
    fn exact_halves_round_up() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(0.1 * 3.0 * 5.0), 2);
        assert_eq!(round_half_up(5000.0 * TRAIN_FRACTION), 3334);
    }

    #[test]
    fn small_datasets_error() {
        assert!(matches!(
            split_sizes(3, TRAIN_FRACTION, VALIDATION_FRACTION),
            Err(SplitError::EmptySplit { which: "validation", .. })
        ));
        assert_eq!(split_sizes(0, 0.5, 0.5), Err(SplitError::EmptyDataset));
        assert!(matches!(split_sizes(10, 1.0, 0.5), Err(SplitError::Fractions { .. })));
    }

    #[test]
    fn seeds() {
        let d = dataset(40);
        let a = split_dataset(&d, TRAIN_FRACTION, VALIDATION_FRACTION, 1).unwrap();
        assert_eq!(a, split_dataset(&d, TRAIN_FRACTION, VALIDATION_FRACTION, 1).unwrap());
        let b = split_dataset(&d, TRAIN_FRACTION, VALIDATION_FRACTION, 2).unwrap();
        assert_ne!(a.test, b.test);
        assert_eq!(
            (a.train.len(), a.validation.len(), a.test.len()),
            (b.train.len(), b.validation.len(), b.test.len())
        );
        let [tr, va, te] = a.select(&d);
        assert_eq!((tr.len(), va.len(), te.len()), (a.train.len(), a.validation.len(), a.test.len()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn split_is_a_partition(n in 6usize..500, seed in any::<u64>()) {
            let d = dataset(n);
            let s = split_dataset(&d, TRAIN_FRACTION, VALIDATION_FRACTION, seed).unwrap();
            let (tr, va, te) = oracle(n);
            prop_assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (tr, va, te));
            let all: HashSet<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
            prop_assert_eq!(all.len(), n);
            prop_assert!(d.ids().iter().all(|id| all.contains(id)));
        }
    }
}
