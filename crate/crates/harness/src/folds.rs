//! Seeded k-fold test partitions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use xres_core::rng;

use crate::{HarnessError, Result};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Disjoint test sets; fold 0 holds any pinned ids.
    pub test: Vec<Vec<String>>,
    pub excluded: Vec<String>,
}

impl FoldPlan {
    /// Every eligible id that is not in fold `fold`'s test set.
    pub fn train(&self, fold: usize) -> Vec<String> {
        let test: BTreeSet<&String> = self.test[fold].iter().collect();
        let mut out: Vec<String> = self
            .test
            .iter()
            .flatten()
            .filter(|id| !test.contains(id))
            .cloned()
            .collect();
        out.sort();
        out
    }
}

/// Partitions `ids \ excluded` into `k` test sets whose sizes differ by at
/// most one. `pinned` ids all land in fold 0. The result depends on the id
/// set, not on the input order.
pub fn make_folds(ids: &[String], excluded: &[String], k: usize, seed: u64, pinned: &[String]) -> Result<FoldPlan> {
    if k < 2 {
        return Err(HarnessError::Folds(format!("k must be at least 2, got {k}")));
    }
    let excl: BTreeSet<&String> = excluded.iter().collect();
    let eligible: BTreeSet<&String> = ids.iter().filter(|i| !excl.contains(i)).collect();
    if eligible.len() < k {
        return Err(HarnessError::Folds(format!("{} eligible ids for {k} folds", eligible.len())));
    }
    let pin: BTreeSet<&String> = pinned.iter().collect();
    if let Some(bad) = pin.iter().find(|p| !eligible.contains(*p)) {
        return Err(HarnessError::Folds(format!("pinned id {bad} is excluded or unknown")));
    }
    let n = eligible.len();
    let sizes: Vec<usize> = (0..k).map(|f| n / k + usize::from(f < n % k)).collect();
    if pin.len() > sizes[0] {
        return Err(HarnessError::Folds(format!("{} pinned ids exceed fold size {}", pin.len(), sizes[0])));
    }
    let mut rest: Vec<String> = eligible.iter().filter(|i| !pin.contains(*i)).map(|s| s.to_string()).collect();
    rest.shuffle(&mut rng::seeded(seed));
    let mut pinned_sorted: Vec<String> = pin.iter().map(|s| s.to_string()).collect();
    pinned_sorted.shuffle(&mut rng::stream(seed, 1));
    let mut pool = pinned_sorted.into_iter().chain(rest);
    let test = sizes.iter().map(|&s| pool.by_ref().take(s).collect()).collect();
    let mut excluded: Vec<String> = excl.into_iter().cloned().collect();
    excluded.dedup();
    Ok(FoldPlan { k, seed, test, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:03}")).collect()
    }

    #[test]
    fn ten_ids_five_folds() {
        let p = make_folds(&ids(10), &[], 5, 1, &[]).unwrap();
        assert!(p.test.iter().all(|t| t.len() == 2));
        assert_eq!(p.train(0).len(), 8);
        assert_eq!(p, make_folds(&ids(10), &[], 5, 1, &[]).unwrap());
    }

    #[test]
    fn pinned_and_errors() {
        let all = ids(20);
        let pinned = vec![all[3].clone(), all[7].clone()];
        let p = make_folds(&all, &all[..2], 5, 3, &pinned).unwrap();
        assert!(pinned.iter().all(|id| p.test[0].contains(id)));
        let too_many = all[2..8].to_vec();
        assert!(make_folds(&all, &[], 5, 3, &too_many).is_err());
        assert!(make_folds(&all, &all[..2], 5, 3, &all[..1]).is_err());
        assert!(make_folds(&all[..4], &[], 5, 3, &[]).is_err());
    }

    proptest! {
        #[test]
        fn partition_set_algebra(n in 5usize..80, n_ex in 0usize..10, k in 2usize..6, seed: u64) {
            let all = ids(n + n_ex);
            let excluded: Vec<String> = all.iter().rev().take(n_ex).cloned().collect();
            let p = make_folds(&all, &excluded, k, seed, &[]).unwrap();
            let mut seen = BTreeSet::new();
            for t in &p.test {
                for id in t {
                    prop_assert!(seen.insert(id.clone()));
                    prop_assert!(!excluded.contains(id));
                }
            }
            prop_assert_eq!(seen.len(), n);
            let sizes: Vec<usize> = p.test.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut shuffled = all.clone();
            shuffled.reverse();
            prop_assert_eq!(&make_folds(&shuffled, &excluded, k, seed, &[]).unwrap(), &p);
        }
    }
}
