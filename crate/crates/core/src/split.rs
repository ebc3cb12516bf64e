//! Seeded 8:1:1 train/val/test split with a labeled subset of train.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub labeled_ratio: f64,
    pub seed: u64,
}

impl SplitManifest {
    pub fn train_len(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len()
    }
}

/// Partition `ids` into labeled/unlabeled/val/test.
///
/// Ids are sorted before the seeded shuffle, so the result depends only on
/// the id set, the ratio and the seed. Each returned list is sorted.
pub fn make_splits<S: AsRef<str>>(ids: &[S], labeled_ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(labeled_ratio.is_finite() && labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::InvalidValue(format!(
            "labeled_ratio must be in (0, 1], got {labeled_ratio}"
        )));
    }
    let canonical: BTreeSet<&str> = ids.iter().map(AsRef::as_ref).collect();
    if canonical.len() != ids.len() {
        return Err(Error::InvalidValue("duplicate ids in split input".into()));
    }
    let n = canonical.len();
    if n < 10 {
        return Err(Error::TooFewIds(n));
    }
    let mut shuffled: Vec<&str> = canonical.into_iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_val = ((n as f64) / 10.0).round() as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    let n_labeled = ((labeled_ratio * n_train as f64).round() as usize).clamp(1, n_train);

    let sorted = |s: &[&str]| {
        let mut v: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        v.sort();
        v
    };
    let (train, rest) = shuffled.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    let (labeled, unlabeled) = train.split_at(n_labeled);
    Ok(SplitManifest {
        labeled_ids: sorted(labeled),
        unlabeled_ids: sorted(unlabeled),
        val_ids: sorted(val),
        test_ids: sorted(test),
        labeled_ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:04}")).collect()
    }

    #[test]
    fn hundred_ids_ten_percent() {
        let m = make_splits(&ids(100), 0.10, 7).unwrap();
        assert_eq!(m.labeled_ids.len(), 8);
        assert_eq!(m.unlabeled_ids.len(), 72);
        assert_eq!(m.val_ids.len(), 10);
        assert_eq!(m.test_ids.len(), 10);
    }

    #[test]
    fn low_ratio_gives_two_labeled() {
        let m = make_splits(&ids(100), 0.025, 1).unwrap();
        assert_eq!(m.labeled_ids.len(), 2);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = make_splits(&ids(57), 0.2, 3).unwrap();
        assert_eq!(a, make_splits(&ids(57), 0.2, 3).unwrap());
        let mut all: Vec<&String> = a
            .labeled_ids
            .iter()
            .chain(&a.unlabeled_ids)
            .chain(&a.val_ids)
            .chain(&a.test_ids)
            .collect();
        assert_eq!(all.len(), 57);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 57);
        assert_ne!(a, make_splits(&ids(57), 0.2, 4).unwrap());
    }

    #[test]
    fn input_order_is_irrelevant() {
        let mut shuffled = ids(40);
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(
            make_splits(&shuffled, 0.1, 5).unwrap(),
            make_splits(&ids(40), 0.1, 5).unwrap()
        );
    }

    #[test]
    fn full_ratio_leaves_no_unlabeled() {
        let m = make_splits(&ids(30), 1.0, 0).unwrap();
        assert!(m.unlabeled_ids.is_empty());
        assert_eq!(m.labeled_ids.len(), 24);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(make_splits(&ids(9), 0.1, 0), Err(Error::TooFewIds(9))));
        assert!(make_splits(&ids(20), 0.0, 0).is_err());
        assert!(make_splits(&ids(20), 1.5, 0).is_err());
        let dup = vec!["a"; 12];
        assert!(make_splits(&dup, 0.1, 0).is_err());
    }

    #[test]
    fn json_keys() {
        let m = make_splits(&ids(10), 0.5, 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        for k in [
            "labeled_ids",
            "unlabeled_ids",
            "val_ids",
            "test_ids",
            "labeled_ratio",
            "seed",
        ] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }
}
