use serde::{Deserialize, Serialize};

use crate::corpus::ItemId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// 1-based rank of `positive` among `candidates`. Ties go to the smaller
/// item id. `scores` is indexed by item id.
pub fn rank_of_positive(scores: &[f64], candidates: &[ItemId], positive: ItemId) -> usize {
    let target = scores[positive as usize];
    1 + candidates
        .iter()
        .filter(|&&c| c != positive)
        .filter(|&&c| {
            let s = scores[c as usize];
            s > target || (s == target && c < positive)
        })
        .count()
}

pub fn pointwise_metrics(rank: usize, k: usize) -> PointMetrics {
    assert!(rank >= 1, "ranks are 1-based");
    let hit = rank <= k;
    PointMetrics {
        recall: if hit { 1.0 } else { 0.0 },
        ndcg: if hit {
            1.0 / ((rank + 1) as f64).log2()
        } else {
            0.0
        },
        mrr: 1.0 / rank as f64,
    }
}
