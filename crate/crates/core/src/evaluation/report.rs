use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::pointwise_metrics;

/// Column layout of the comparison table.
pub const TABLE_HEADER: &str =
    "model,sampled_recall@10,sampled_ndcg@10,unsampled_recall@10,unsampled_ndcg@10,train_seconds";

/// Per-user ranks and metrics for one evaluation mode. Users appear in
/// index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub cutoffs: Vec<usize>,
    pub ranks: Vec<usize>,
    /// `recall[k][u]` for cutoff `cutoffs[k]`.
    pub recall: Vec<Vec<f64>>,
    pub ndcg: Vec<Vec<f64>>,
    pub mrr: Vec<f64>,
}

impl ModeMetrics {
    pub(crate) fn new(cutoffs: &[usize], capacity: usize) -> Self {
        ModeMetrics {
            cutoffs: cutoffs.to_vec(),
            ranks: Vec::with_capacity(capacity),
            recall: vec![Vec::with_capacity(capacity); cutoffs.len()],
            ndcg: vec![Vec::with_capacity(capacity); cutoffs.len()],
            mrr: Vec::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, rank: usize) {
        for (k, &cut) in self.cutoffs.iter().enumerate() {
            let m = pointwise_metrics(rank, cut);
            self.recall[k].push(m.recall);
            self.ndcg[k].push(m.ndcg);
        }
        self.mrr.push(pointwise_metrics(rank, 1).mrr);
        self.ranks.push(rank);
    }

    fn slot(&self, k: usize) -> Option<usize> {
        self.cutoffs.iter().position(|&c| c == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<&[f64]> {
        self.slot(k).map(|i| self.recall[i].as_slice())
    }

    pub fn ndcg_at(&self, k: usize) -> Option<&[f64]> {
        self.slot(k).map(|i| self.ndcg[i].as_slice())
    }

    /// Per-user values of a metric named like `recall@10`, `ndcg@5` or `mrr`.
    pub fn metric(&self, name: &str) -> Option<&[f64]> {
        if name == "mrr" {
            return Some(&self.mrr);
        }
        let (kind, k) = name.split_once('@')?;
        let k: usize = k.parse().ok()?;
        match kind {
            "recall" => self.recall_at(k),
            "ndcg" => self.ndcg_at(k),
            _ => None,
        }
    }

    pub fn mean_recall(&self, k: usize) -> Option<f64> {
        self.recall_at(k).map(mean)
    }

    pub fn mean_ndcg(&self, k: usize) -> Option<f64> {
        self.ndcg_at(k).map(mean)
    }

    pub fn mean_mrr(&self) -> f64 {
        mean(&self.mrr)
    }

    /// Metric name to mean value, e.g. `recall@10`.
    pub fn means(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (i, &k) in self.cutoffs.iter().enumerate() {
            out.insert(format!("recall@{k}"), mean(&self.recall[i]));
            out.insert(format!("ndcg@{k}"), mean(&self.ndcg[i]));
        }
        out.insert("mrr".into(), self.mean_mrr());
        out
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.means().into_keys().collect()
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_users: usize,
    pub sampled: Option<ModeMetrics>,
    pub unsampled: Option<ModeMetrics>,
    pub eval_seconds: f64,
}

/// Means only, for compact JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub num_users: usize,
    pub eval_seconds: f64,
    pub sampled: Option<BTreeMap<String, f64>>,
    pub unsampled: Option<BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn mode(&self, name: &str) -> Option<&ModeMetrics> {
        match name {
            "sampled" => self.sampled.as_ref(),
            "unsampled" => self.unsampled.as_ref(),
            _ => None,
        }
    }

    /// Equality of everything except the wall-clock field.
    pub fn same_metrics(&self, other: &EvalReport) -> bool {
        self.num_users == other.num_users
            && self.sampled == other.sampled
            && self.unsampled == other.unsampled
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            num_users: self.num_users,
            eval_seconds: self.eval_seconds,
            sampled: self.sampled.as_ref().map(ModeMetrics::means),
            unsampled: self.unsampled.as_ref().map(ModeMetrics::means),
        }
    }

    /// One row in [`TABLE_HEADER`] layout; metrics that were not computed
    /// are left empty.
    pub fn table_row(&self, label: &str, train_seconds: f64) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let s = self.sampled.as_ref();
        let u = self.unsampled.as_ref();
        format!(
            "{label},{},{},{},{},{train_seconds}",
            cell(s.and_then(|m| m.mean_recall(10))),
            cell(s.and_then(|m| m.mean_ndcg(10))),
            cell(u.and_then(|m| m.mean_recall(10))),
            cell(u.and_then(|m| m.mean_ndcg(10))),
        )
    }
}
