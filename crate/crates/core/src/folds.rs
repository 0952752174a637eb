//! Seeded k-fold cross-validation splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::rng::SeededRng;

pub const NUM_FOLDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Shuffles the ids once and cuts them into four validation blocks; each
/// fold trains on the other three. Block sizes differ by at most one.
pub fn make_folds(case_ids: &[String], seed: u64) -> Result<Vec<FoldSplit>> {
    if case_ids.len() < NUM_FOLDS {
        return Err(SegError::TooFewCases {
            needed: NUM_FOLDS,
            got: case_ids.len(),
        });
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut SeededRng::labeled(seed, "folds").rng());
    let n = ids.len();
    let bounds: Vec<usize> = (0..=NUM_FOLDS).map(|k| k * n / NUM_FOLDS).collect();
    Ok((0..NUM_FOLDS)
        .map(|k| {
            let val = ids[bounds[k]..bounds[k + 1]].to_vec();
            let train = ids[..bounds[k]].iter().chain(&ids[bounds[k + 1]..]).cloned().collect();
            FoldSplit { fold: k, train, val }
        })
        .collect())
}
