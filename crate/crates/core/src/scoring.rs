//! Shared scoring surface for expert models, plus ranking helpers.

use std::cmp::Ordering;

use thiserror::Error;

use crate::corpus::ItemId;

/// A candidate's score under one model; `None` marks an item outside the
/// model's vocabulary.
pub type ItemScore = Option<f64>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("prefix has no in-vocabulary items")]
    EmptyPrefixAfterFiltering,
}

/// A trained model that scores candidate next items given a click prefix.
pub trait Scorer: Send + Sync {
    fn score(&self, prefix: &[ItemId], candidates: &[ItemId]) -> Result<Vec<ItemScore>, ScoreError>;

    fn contains(&self, item: ItemId) -> bool;
}

/// Descending score, ties by ascending item id.
#[inline]
pub fn cmp_ranked(a: (ItemId, f64), b: (ItemId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Sorts every candidate by descending score with the id tie-break.
pub fn rank_all(mut scored: Vec<(ItemId, f64)>) -> Vec<ItemId> {
    scored.sort_by(|a, b| cmp_ranked(*a, *b));
    scored.into_iter().map(|(i, _)| i).collect()
}

/// The first `k` entries of [`rank_all`], without sorting the tail.
pub fn top_k(mut scored: Vec<(ItemId, f64)>, k: usize) -> Vec<ItemId> {
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, |a, b| cmp_ranked(*a, *b));
        scored.truncate(k);
    }
    rank_all(scored)
}
