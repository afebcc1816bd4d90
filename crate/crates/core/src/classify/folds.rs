use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fold membership as lists of item indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// `(train, test)` indices of fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let test = self.folds[f].clone();
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        train.sort_unstable();
        (train, test)
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }
}

/// Shuffles the items of every stratum (e.g. each (subject, affect) pair)
/// with a seeded generator and deals them round-robin over the folds. Each
/// stratum starts dealing where the previous one stopped, so fold sizes
/// stay within one of each other overall as well as per stratum.
pub fn stratified_kfold<K: Ord + Clone>(
    strata: &[K],
    n_folds: usize,
    seed: u64,
) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 folds, got {n_folds}"
        )));
    }
    if strata.is_empty() {
        return Err(Error::invalid("nothing to split"));
    }
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in strata.iter().enumerate() {
        groups.entry(k.clone()).or_default().push(i);
    }
    let smallest = groups.values().map(Vec::len).min().unwrap_or(0);
    if smallest < n_folds {
        log::warn!("a stratum has {smallest} items for {n_folds} folds; it will be missing from some folds");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); n_folds];
    let mut next = 0;
    for items in groups.values_mut() {
        items.shuffle(&mut rng);
        for &i in items.iter() {
            folds[next].push(i);
            next = (next + 1) % n_folds;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_stratum_of_twenty() {
        let s = stratified_kfold(&[0u8; 20], 5, 1).unwrap();
        assert!(s.folds.iter().all(|f| f.len() == 4));
    }

    #[test]
    fn partition() {
        let strata: Vec<(u8, u8)> = (0..97).map(|i| ((i % 3) as u8, (i % 4) as u8)).collect();
        let s = stratified_kfold(&strata, 5, 9).unwrap();
        let mut all: Vec<usize> = s.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
        let (train, test) = s.split(2);
        assert_eq!(train.len() + test.len(), 97);
        assert!(test.iter().all(|t| train.binary_search(t).is_err()));
    }
}
