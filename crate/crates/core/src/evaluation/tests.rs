use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::PopularityTable;

fn split_of(train: Vec<Vec<ItemId>>, test: Vec<ItemId>, num_items: usize) -> SplitDataset {
    let n = train.len();
    SplitDataset {
        train,
        test,
        validation: BTreeMap::new(),
        val_user_seed: 0,
        num_items,
        user_names: (0..n).map(|u| format!("u{u}")).collect(),
    }
}

fn uniform_pop(v: usize) -> PopularityTable {
    PopularityTable::from_counts(vec![1; v]).unwrap()
}

/// Explicit sort by score then id, the position of the positive.
fn reference_rank(scores: &[f64], candidates: &[ItemId], positive: ItemId) -> usize {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.iter().position(|&c| c == positive).unwrap() + 1
}

#[test]
fn unique_max_ranks_first() {
    let scores = [f64::NEG_INFINITY, 0.1, 0.9, 0.3, f64::NEG_INFINITY];
    assert_eq!(rank_of_positive(&scores, &[1, 2, 3], 2), 1);
    assert_eq!(rank_of_positive(&scores, &[1, 2, 3], 1), 3);
}

#[test]
fn ties_go_to_smaller_ids() {
    let scores = vec![0.5; 103];
    let candidates: Vec<ItemId> = (1..=101).collect();
    assert_eq!(rank_of_positive(&scores, &candidates, 1), 1);
    assert_eq!(rank_of_positive(&scores, &candidates, 101), 101);
    assert_eq!(rank_of_positive(&scores, &candidates, 40), 40);
}

#[test]
fn pointwise_examples() {
    let m = pointwise_metrics(1, 10);
    assert_eq!((m.recall, m.ndcg, m.mrr), (1.0, 1.0, 1.0));
    assert_eq!(pointwise_metrics(3, 10).ndcg, 0.5);
    let m = pointwise_metrics(11, 10);
    assert_eq!((m.recall, m.ndcg), (0.0, 0.0));
    assert_eq!(m.mrr, 1.0 / 11.0);
    let m = pointwise_metrics(10, 10);
    assert_eq!(m.recall, 1.0);
}

#[test]
fn forced_negative_set() {
    let pop = PopularityTable::from_counts(vec![5, 1, 3, 2, 7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let got: BTreeSet<ItemId> = sample_popularity_negatives(&pop, 3, &[], 4, &mut rng)
        .unwrap()
        .into_iter()
        .collect();
    assert_eq!(got, BTreeSet::from([1, 2, 4, 5]));
}

#[test]
fn negatives_follow_popularity() {
    let pop = PopularityTable::from_counts(vec![3, 1, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 10_000;
    let a = (0..trials)
        .filter(|_| sample_popularity_negatives(&pop, 3, &[], 1, &mut rng).unwrap()[0] == 1)
        .count();
    let share = a as f64 / trials as f64;
    assert!((share - 0.75).abs() <= 0.02, "{share}");
}

#[test]
fn negatives_are_deterministic_per_user() {
    let pop = PopularityTable::from_counts((1..=300).collect()).unwrap();
    let cfg = EvalConfig::default();
    let draw = |u| sample_popularity_negatives(&pop, 7, &[1, 2], 100, &mut cfg.user_rng(u)).unwrap();
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn negatives_skip_history_and_zero_counts() {
    let mut counts = vec![1u64; 20];
    counts[4] = 0;
    let pop = PopularityTable::from_counts(counts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let neg = sample_popularity_negatives(&pop, 1, &[2, 3, 4], 15, &mut rng).unwrap();
        let set: BTreeSet<ItemId> = neg.iter().copied().collect();
        assert_eq!(set.len(), 15);
        assert!(set.iter().all(|i| ![1, 2, 3, 4, 5].contains(i)));
    }
    assert!(matches!(
        sample_popularity_negatives(&pop, 1, &[2, 3, 4], 16, &mut rng),
        Err(Error::Sampling {
            wanted: 16,
            available: 15
        })
    ));
}

#[test]
fn exact_fallback_when_history_holds_most_mass() {
    let mut counts = vec![1u64; 10];
    counts[0] = 1000;
    let pop = PopularityTable::from_counts(counts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let neg = sample_popularity_negatives(&pop, 2, &[1], 8, &mut rng).unwrap();
    let set: BTreeSet<ItemId> = neg.into_iter().collect();
    assert_eq!(set, (3..=10).collect());
}

#[test]
fn oracle_scorer_scores_perfectly() {
    let v = 130;
    let train: Vec<Vec<ItemId>> = (0..40).map(|u| vec![(u % 5 + 1) as ItemId]).collect();
    let test: Vec<ItemId> = (0..40).map(|u| (u % 20 + 10) as ItemId).collect();
    let split = split_of(train, test.clone(), v);
    let report = evaluate_with(&split, &uniform_pop(v), &EvalConfig::default(), |users, _| {
        Ok(users
            .iter()
            .map(|&u| {
                let mut row = vec![0.0; v + 2];
                row[test[u] as usize] = 1.0;
                row
            })
            .collect())
    })
    .unwrap();
    for mode in [report.sampled.as_ref(), report.unsampled.as_ref()] {
        let means = mode.unwrap().means();
        assert!(means.values().all(|&m| m == 1.0), "{means:?}");
    }
}

#[test]
fn random_scores_give_harmonic_mrr() {
    let v = 100;
    let users = 20_000;
    let split = split_of(vec![vec![1]; users], vec![50; users], v);
    let cfg = EvalConfig {
        mode: EvalMode::Unsampled,
        exclude_history: false,
        ..EvalConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let report = evaluate_with(&split, &uniform_pop(v), &cfg, |u, _| {
        Ok(u.iter()
            .map(|_| (0..v + 2).map(|_| rng.random::<f64>()).collect())
            .collect())
    })
    .unwrap();
    let harmonic = (1..=v).map(|k| 1.0 / k as f64).sum::<f64>() / v as f64;
    assert!((harmonic - 0.05187377517639621).abs() < 1e-15);
    let mrr = report.unsampled.unwrap().mean_mrr();
    assert!((mrr - harmonic).abs() < 0.003, "{mrr}");
}

#[test]
fn history_is_excluded_from_full_ranking() {
    let v = 5;
    let split = split_of(vec![vec![1, 2]], vec![3], v);
    let scorer = |_: &[usize], _: &[&[ItemId]]| Ok(vec![vec![0.0, 9.0, 8.0, 1.0, 0.5, 0.2, 0.0]]);
    let cfg = EvalConfig {
        mode: EvalMode::Unsampled,
        ..EvalConfig::default()
    };
    let on = evaluate_with(&split, &uniform_pop(v), &cfg, scorer).unwrap();
    assert_eq!(on.unsampled.unwrap().ranks, vec![1]);
    let off = EvalConfig {
        exclude_history: false,
        ..cfg
    };
    let off = evaluate_with(&split, &uniform_pop(v), &off, scorer).unwrap();
    assert_eq!(off.unsampled.unwrap().ranks, vec![3]);
}

#[test]
fn evaluation_is_repeatable() {
    let v = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train: Vec<Vec<ItemId>> = (0..60)
        .map(|_| (0..5).map(|_| rng.random_range(1..=v as ItemId)).collect())
        .collect();
    let test: Vec<ItemId> = (0..60).map(|_| rng.random_range(1..=v as ItemId)).collect();
    let split = split_of(train, test, v);
    let pop = PopularityTable::from_split(&split, crate::corpus::PopularitySource::Full).unwrap();
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..v + 2).map(|_| rng.random::<f64>()).collect())
        .collect();
    let run = || {
        evaluate_with(&split, &pop, &EvalConfig::default(), |users, _| {
            Ok(users.iter().map(|&u| rows[u].clone()).collect())
        })
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.same_metrics(&b));
    let (s, u) = (a.sampled.unwrap(), a.unsampled.unwrap());
    assert!(s.ranks.iter().zip(&u.ranks).all(|(s, u)| s <= u));
}

#[test]
fn table_row_layout() {
    let split = split_of(vec![vec![1]], vec![2], 3);
    let report = evaluate_with(
        &split,
        &PopularityTable::from_counts(vec![1, 1, 1]).unwrap(),
        &EvalConfig {
            num_negatives: 1,
            ..EvalConfig::default()
        },
        |_, _| Ok(vec![vec![0.0, 0.0, 1.0, 0.5, 0.0]]),
    )
    .unwrap();
    assert_eq!(report.table_row("m", 2.5), "m,1,1,1,1,2.5");
    assert_eq!(TABLE_HEADER.split(',').count(), 6);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        EvalConfig {
            cutoffs: vec![],
            ..EvalConfig::default()
        },
        EvalConfig {
            cutoffs: vec![0, 5],
            ..EvalConfig::default()
        },
        EvalConfig {
            num_negatives: 0,
            ..EvalConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err());
    }
}

#[test]
fn t_table_value() {
    let p = two_tailed_p(2.776, 4.0);
    assert!((p - 0.0500227783199764).abs() < 1e-9, "{p}");
}

#[test]
fn paired_test_matches_reference_values() {
    let a = [0.9, 0.4, 0.75, 0.3, 0.8, 0.55];
    let b = [0.7, 0.5, 0.6, 0.1, 0.65, 0.5];
    let r = paired_ttest_bonferroni(&a, &b, 1).unwrap();
    assert!((r.t_statistic - 2.2909489747632854).abs() < 1e-9);
    assert!((r.raw_p - 0.07056563534883982).abs() < 1e-9);
    assert!(!r.significant);
}

#[test]
fn identical_samples_are_not_significant() {
    let a = [0.1, 0.5, 0.7];
    let r = paired_ttest_bonferroni(&a, &a, 3).unwrap();
    assert_eq!((r.raw_p, r.corrected_p, r.significant), (1.0, 1.0, false));
    let shifted: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
    let r = paired_ttest_bonferroni(&shifted, &a, 1).unwrap();
    assert_eq!(r.raw_p, 0.0);
    assert!(r.significant);
}

#[test]
fn bonferroni_arithmetic() {
    let r = stats::SignificanceResult::from_p(2.0, 0.03, 2);
    assert!((r.corrected_p - 0.06).abs() < 1e-15);
    assert!(!r.significant);
    assert_eq!(stats::SignificanceResult::from_p(2.0, 0.7, 3).corrected_p, 1.0);
    assert!(stats::SignificanceResult::from_p(2.0, 0.01, 2).significant);
}

#[test]
fn paired_test_contracts() {
    assert!(paired_ttest_bonferroni(&[1.0, 2.0], &[1.0], 1).is_err());
    assert!(paired_ttest_bonferroni(&[1.0], &[1.0], 1).is_err());
}

#[test]
fn replication_examples() {
    let ok = replication_check(0.6975, 0.6970).unwrap();
    assert!(ok.replicated);
    assert_eq!(format!("{:+.2}%", ok.relative_diff * 100.0), "+0.07%");
    let bad = replication_check(0.5215, 0.6970).unwrap();
    assert!(!bad.replicated);
    assert_eq!(format!("{:+.2}%", bad.relative_diff * 100.0), "-25.18%");
    assert!(replication_check(0.3, 0.3).unwrap().replicated);
    assert!(replication_check(0.3, 0.0).is_err());
    assert!(replication_check(0.3, -1.0).is_err());
}

fn instance() -> impl Strategy<Value = (Vec<f64>, usize, ItemId, u64)> {
    (2usize..=50).prop_flat_map(|v| {
        (
            // coarse values force ties
            prop::collection::vec(0u8..8, v + 2).prop_map(|s| s.into_iter().map(f64::from).collect()),
            Just(v),
            1..=v as ItemId,
            any::<u64>(),
        )
    })
}

proptest! {
    #[test]
    fn rank_matches_sort_reference((scores, v, positive, seed) in instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<ItemId> = (1..=v as ItemId).collect();
        prop_assert_eq!(rank_of_positive(&scores, &all, positive), reference_rank(&scores, &all, positive));
        let n = rng.random_range(1..v.max(2)).min(v - 1);
        if n >= 1 {
            let pop = PopularityTable::from_counts((0..v).map(|_| rng.random_range(1..5)).collect()).unwrap();
            let mut cands = sample_popularity_negatives(&pop, positive, &[], n, &mut rng).unwrap();
            prop_assert_eq!(cands.iter().collect::<BTreeSet<_>>().len(), n);
            prop_assert!(!cands.contains(&positive));
            cands.push(positive);
            let sampled = rank_of_positive(&scores, &cands, positive);
            prop_assert_eq!(sampled, reference_rank(&scores, &cands, positive));
            prop_assert!(sampled <= rank_of_positive(&scores, &all, positive));
        }
    }

    #[test]
    fn metric_ranges(rank in 1usize..500, k in 1usize..50) {
        let m = pointwise_metrics(rank, k);
        prop_assert!((0.0..=1.0).contains(&m.ndcg));
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        prop_assert!(pointwise_metrics(rank, k + 1).recall >= m.recall);
    }
}
