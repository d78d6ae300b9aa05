//! Top-K ranking metrics, per-user evaluation reports and paired
//! significance tests.
//!
//! Recall divides by the full target size `|truth|`, not `min(|truth|, k)`,
//! so Recall@10 cannot reach 1 on baskets larger than 10. NDCG uses binary
//! relevance. UN@K is the share of the top K the user has never bought.

mod report;
mod stats;

pub use report::{evaluate_model, evaluate_users, EvalReport, Metric, MetricSeries, PerUserTable, Recommender};
pub use stats::{paired_t_test, TTest};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::data::ItemId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ground-truth basket is empty")]
    EmptyTruth,
    #[error("ranking has {len} items, cutoff {k} requested")]
    RankingTooShort { len: usize, k: usize },
    #[error("ranking repeats item {0}")]
    DuplicateItem(ItemId),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired samples, got {0}")]
    TooFewSamples(usize),
    #[error("recommender failed: {0}")]
    Recommender(String),
    #[error("malformed per-user report: {0}")]
    BadReport(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn truth_set(truth: &[ItemId]) -> Result<BTreeSet<ItemId>> {
    if truth.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    Ok(truth.iter().copied().collect())
}

/// `|top-k ∩ truth| / |truth|`.
pub fn recall_at_k(ranked: &[ItemId], truth: &[ItemId], k: usize) -> Result<f64> {
    let truth = truth_set(truth)?;
    let hits = ranked.iter().take(k).filter(|i| truth.contains(i)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Binary-relevance NDCG with `log2(rank + 1)` discounts.
pub fn ndcg_at_k(ranked: &[ItemId], truth: &[ItemId], k: usize) -> Result<f64> {
    let truth = truth_set(truth)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(j, _)| 1.0 / (j as f64 + 2.0).log2())
        .sum();
    let idcg: f64 = (0..k.min(truth.len())).map(|j| 1.0 / (j as f64 + 2.0).log2()).sum();
    Ok(dcg / idcg)
}

/// Fraction of the top `k` absent from `history`.
pub fn user_novelty_at_k(ranked: &[ItemId], history: &BTreeSet<ItemId>, k: usize) -> Result<f64> {
    if k > ranked.len() || k == 0 {
        return Err(MetricError::RankingTooShort { len: ranked.len(), k });
    }
    let new = ranked[..k].iter().filter(|i| !history.contains(i)).count();
    Ok(new as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[0, 1], &[1, 2], 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[3, 1, 2, 0], &[1, 3], 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[0], &[], 1), Err(MetricError::EmptyTruth));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[4, 2, 7], &[2, 4, 7], 3).unwrap(), 1.0);
        let v = ndcg_at_k(&[0, 1, 2], &[0, 2], 3).unwrap();
        let expected = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.9197).abs() < 5e-5);
        assert_eq!(ndcg_at_k(&[5, 6, 7], &[1], 3).unwrap(), 0.0);
    }

    #[test]
    fn novelty_examples() {
        let hist: BTreeSet<ItemId> = [0, 1].into();
        assert_eq!(user_novelty_at_k(&[1, 0, 5], &hist, 2).unwrap(), 0.0);
        assert_eq!(user_novelty_at_k(&[0, 1], &[0].into(), 2).unwrap(), 0.5);
        assert_eq!(user_novelty_at_k(&[3, 4], &BTreeSet::new(), 2).unwrap(), 1.0);
        assert!(user_novelty_at_k(&[3], &BTreeSet::new(), 2).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<ItemId>, Vec<ItemId>, usize)> {
        (
            prop::collection::vec(any::<u64>(), 1..40),
            prop::collection::vec(0u32..40, 1..10),
            1usize..20,
        )
            .prop_map(|(keys, truth, k)| {
                let mut items: Vec<ItemId> = (0..40).collect();
                items.sort_by_key(|&i| keys[i as usize % keys.len()].wrapping_mul(i as u64 + 1));
                (items, truth, k)
            })
    }

    proptest! {
        #[test]
        fn metrics_invariant_to_permutations_within_and_below_top_k((ranked, truth, k) in instance(), seed in any::<u64>()) {
            let k = k.min(ranked.len());
            let mut shuffled = ranked.clone();
            // reverse inside each side of the k boundary
            shuffled[..k].reverse();
            shuffled[k..].rotate_left((seed as usize) % (ranked.len() - k).max(1));
            prop_assert_eq!(recall_at_k(&ranked, &truth, k).unwrap(), recall_at_k(&shuffled, &truth, k).unwrap());
            let tail_only = {
                let mut t = ranked.clone();
                t[k..].reverse();
                t
            };
            prop_assert_eq!(ndcg_at_k(&ranked, &truth, k).unwrap(), ndcg_at_k(&tail_only, &truth, k).unwrap());
        }

        #[test]
        fn ndcg_bounds_and_perfection((ranked, truth, k) in instance()) {
            let v = ndcg_at_k(&ranked, &truth, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let set: BTreeSet<ItemId> = truth.iter().copied().collect();
            let top_relevant = ranked.iter().take(k.min(set.len())).all(|i| set.contains(i));
            prop_assert_eq!(top_relevant, (v - 1.0).abs() < 1e-12);
        }

        #[test]
        fn novelty_of_empty_history_is_one((ranked, _t, k) in instance()) {
            prop_assert_eq!(user_novelty_at_k(&ranked, &BTreeSet::new(), k.min(ranked.len())).unwrap(), 1.0);
        }
    }
}
