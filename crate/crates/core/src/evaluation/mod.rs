//! Leave-one-out ranking evaluation: popularity-sampled and full-catalog
//! metrics, paired significance tests, and the replication gate.

mod metrics;
mod report;
mod stats;
#[cfg(test)]
mod tests;

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, PopularityTable, SplitDataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, stream_rng};

pub use metrics::{pointwise_metrics, rank_of_positive, PointMetrics};
pub use report::{EvalReport, ModeMetrics, ReportSummary, TABLE_HEADER};
pub use stats::{
    paired_ttest_bonferroni, replication_check, two_tailed_p, ReplicationVerdict, SignificanceResult,
    REPLICATION_TOLERANCE, SIGNIFICANCE_LEVEL,
};

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_NUM_NEGATIVES: usize = 100;
pub const DEFAULT_EVAL_SEED: u64 = 2024;

const NEGATIVE_STREAM: u64 = 11;
const SCORING_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Sampled,
    Unsampled,
    Both,
}

impl EvalMode {
    pub fn sampled(self) -> bool {
        matches!(self, EvalMode::Sampled | EvalMode::Both)
    }

    pub fn unsampled(self) -> bool {
        matches!(self, EvalMode::Unsampled | EvalMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Sampled => "sampled",
            EvalMode::Unsampled => "unsampled",
            EvalMode::Both => "both",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(EvalMode::Sampled),
            "unsampled" => Ok(EvalMode::Unsampled),
            "both" => Ok(EvalMode::Both),
            other => Err(Error::Config(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub cutoffs: Vec<usize>,
    pub num_negatives: usize,
    /// Drop the user's history from negatives and from the full ranking.
    pub exclude_history: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Both,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            num_negatives: DEFAULT_NUM_NEGATIVES,
            exclude_history: true,
            seed: DEFAULT_EVAL_SEED,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Config("cutoffs must be non-empty and positive".into()));
        }
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be at least 1".into()));
        }
        Ok(())
    }

    /// The negative sampler for `user`, independent of evaluation order.
    pub fn user_rng(&self, user: usize) -> rand_chacha::ChaCha8Rng {
        stream_rng(derive_seed(self.seed, NEGATIVE_STREAM), user as u64)
    }
}

/// `n` distinct items drawn with probability proportional to popularity,
/// never the positive and never an item in `history`. Items with a zero
/// count cannot be drawn.
pub fn sample_popularity_negatives<R: Rng + ?Sized>(
    pop: &PopularityTable,
    positive: ItemId,
    history: &[ItemId],
    n: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    let mut banned: HashSet<ItemId> = history.iter().copied().collect();
    banned.insert(positive);
    let eligible: Vec<ItemId> = (1..=pop.num_items() as ItemId)
        .filter(|i| pop.count(*i) > 0 && !banned.contains(i))
        .collect();
    if eligible.len() < n {
        return Err(Error::Sampling {
            wanted: n,
            available: eligible.len(),
        });
    }
    let eligible_mass: u64 = eligible.iter().map(|&i| pop.count(i)).sum();
    let mut out = Vec::with_capacity(n);
    // rejection is cheap while most of the mass stays eligible
    if eligible_mass * 2 >= pop.total() {
        let budget = 64 * n + 1024;
        for _ in 0..budget {
            if out.len() == n {
                return Ok(out);
            }
            let item = pop.sample(rng);
            if banned.insert(item) {
                out.push(item);
            }
        }
    }
    // exact sequential draw over what is left
    let mut rest: Vec<ItemId> = eligible.into_iter().filter(|i| !banned.contains(i)).collect();
    let mut mass: u64 = rest.iter().map(|&i| pop.count(i)).sum();
    while out.len() < n {
        let mut r = rng.random_range(0..mass);
        let idx = rest
            .iter()
            .position(|&i| {
                let c = pop.count(i);
                if r < c {
                    true
                } else {
                    r -= c;
                    false
                }
            })
            .expect("r below remaining mass");
        let item = rest.remove(idx);
        mass -= pop.count(item);
        out.push(item);
    }
    Ok(out)
}

/// Scores for one user's test prediction, indexed by item id.
pub type ScoreRow = Vec<f64>;

/// Evaluates every user's held-out test item. Each user is scored once and
/// both modes rank from that one score vector.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    split: &SplitDataset,
    pop: &PopularityTable,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_with(split, pop, cfg, |users, histories| {
        Ok(model
            .score_batch(users, histories)?
            .into_iter()
            .map(|row| row.into_iter().map(Scalar::as_f64).collect())
            .collect())
    })
}

/// Evaluation over an arbitrary scorer returning `V + 2`-length rows.
pub fn evaluate_with<F>(
    split: &SplitDataset,
    pop: &PopularityTable,
    cfg: &EvalConfig,
    mut scorer: F,
) -> Result<EvalReport>
where
    F: FnMut(&[usize], &[&[ItemId]]) -> Result<Vec<ScoreRow>>,
{
    cfg.validate()?;
    if split.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let n = split.num_users();
    let v = split.num_items;
    let mut sampled = cfg.mode.sampled().then(|| ModeMetrics::new(&cfg.cutoffs, n));
    let mut unsampled = cfg
        .mode
        .unsampled()
        .then(|| ModeMetrics::new(&cfg.cutoffs, n));
    let all_items: Vec<ItemId> = (1..=v as ItemId).collect();

    let users: Vec<usize> = (0..n).collect();
    for chunk in users.chunks(SCORING_CHUNK) {
        let histories: Vec<Vec<ItemId>> = chunk.iter().map(|&u| split.test_history(u)).collect();
        let refs: Vec<&[ItemId]> = histories.iter().map(Vec::as_slice).collect();
        let rows = scorer(chunk, &refs)?;
        if rows.len() != chunk.len() {
            return Err(Error::Shape(format!(
                "scorer returned {} rows for {} users",
                rows.len(),
                chunk.len()
            )));
        }
        for ((&u, history), mut scores) in chunk.iter().zip(&histories).zip(rows) {
            if scores.len() != v + 2 {
                return Err(Error::Shape(format!(
                    "score row of length {} for {v} items",
                    scores.len()
                )));
            }
            let positive = split.test[u];
            if cfg.exclude_history {
                for &i in history {
                    if i != positive {
                        scores[i as usize] = f64::NEG_INFINITY;
                    }
                }
            }
            if let Some(m) = unsampled.as_mut() {
                m.push(rank_of_positive(&scores, &all_items, positive));
            }
            if let Some(m) = sampled.as_mut() {
                let excluded: &[ItemId] = if cfg.exclude_history { history } else { &[] };
                let mut rng = cfg.user_rng(u);
                let mut candidates =
                    sample_popularity_negatives(pop, positive, excluded, cfg.num_negatives, &mut rng)?;
                candidates.push(positive);
                m.push(rank_of_positive(&scores, &candidates, positive));
            }
        }
    }
    Ok(EvalReport {
        num_users: n,
        sampled,
        unsampled,
        eval_seconds: start.elapsed().as_secs_f64(),
    })
}
