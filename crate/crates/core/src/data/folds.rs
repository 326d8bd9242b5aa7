use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};

/// Assignment of sample ids to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// `(id, fold)` in shuffled order.
    pub assignments: Vec<(usize, usize)>,
}

impl FoldPlan {
    pub fn fold_ids(&self, fold: usize) -> Vec<usize> {
        self.assignments.iter().filter(|a| a.1 == fold).map(|a| a.0).collect()
    }

    /// Ids outside `fold`, in assignment order.
    pub fn complement_ids(&self, fold: usize) -> Vec<usize> {
        self.assignments.iter().filter(|a| a.1 != fold).map(|a| a.0).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.fold_ids(f).len()).collect()
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn kfold(ids: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > ids.len() {
        return contract("kfold", format!("k = {k} for {} ids", ids.len()));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldPlan { k, seed, assignments })
}
