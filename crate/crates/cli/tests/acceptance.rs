//! Acceptance suite. Prints one PASS/FAIL/NOT RUN line per criterion to
//! stderr (unbuffered, so the lines survive test output capture) and fails
//! if any criterion that ran did not pass.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrec::corpus::{
    compute_stats, leave_one_out_split, load_interactions, preprocess_min_length, InputFormat,
    ItemId, PopularityTable, SplitDataset,
};
use seqrec::evaluation::{
    evaluate_model, evaluate_with, paired_ttest_bonferroni, replication_check,
    sample_popularity_negatives, two_tailed_p, EvalConfig, EvalMode, ModeMetrics,
};
use seqrec::models::{build_model, AttentionMode, EncoderModel, Model, ModelConfig, ModelKind, PaddedBatch};
use seqrec::review::{aggregate_outcomes, load_comparisons, DEFAULT_MIN_PAPERS};
use seqrec::synthetic::{cyclic_dataset, zipf_dataset};
use seqrec::tensor::gradcheck::GradCheck;
use seqrec::tensor::Tape;
use seqrec::training::{check_training_gradients, mask_sequence, train_model, Stopping, TrainConfig};
use seqrec_cli::experiment::{prepare, sweep_training_budget, FRONTIER_FILE};
use seqrec_cli::ExperimentConfig;

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Checked = Result<Verdict, String>;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root exists")
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn c1_ml1m_stats() -> Checked {
    let path = std::env::var_os("SEQREC_ML1M")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/ml-1m.txt"));
    if !path.is_file() {
        return Ok(Verdict::NotRun(format!(
            "preprocessed ML-1M file not found at {} (set SEQREC_ML1M)",
            path.display()
        )));
    }
    let ds = load_interactions(&path, InputFormat::PairPerLine).map_err(|e| e.to_string())?;
    let ds = preprocess_min_length(&ds, 5).map_err(|e| e.to_string())?;
    let s = compute_stats(&ds);
    let ok = s.users == 6040
        && s.items == 3416
        && s.interactions == 999_611
        && (s.avg_len - 165.49).abs() <= 0.01
        && (s.sparsity - 0.9515).abs() <= 0.0001;
    Ok(check(
        ok,
        format!(
            "users={} items={} interactions={} avg_len={:.4} sparsity={:.5}",
            s.users, s.items, s.interactions, s.avg_len, s.sparsity
        ),
    ))
}

fn c2_review_table() -> Checked {
    let records = load_comparisons(workspace_root().join("data/review_comparisons.csv"))
        .map_err(|e| e.to_string())?;
    let table = aggregate_outcomes(&records, DEFAULT_MIN_PAPERS).map_err(|e| e.to_string())?;
    let beauty = table
        .rows
        .iter()
        .find(|r| r.dataset == "Beauty")
        .ok_or("no Beauty row")?;
    let t = &table.total;
    let ok = t.counts == [86, 32, 16] && t.total == 134 && beauty.counts == [12, 5, 2] && beauty.total == 19;
    Ok(check(
        ok,
        format!(
            "Total {:?} of {}, Beauty {:?} of {}",
            t.counts, t.total, beauty.counts, beauty.total
        ),
    ))
}

/// Rank by sorting candidates on (score desc, id asc).
fn reference_rank(scores: &[f64], candidates: &[ItemId], positive: ItemId) -> usize {
    let mut c = candidates.to_vec();
    c.sort_by(|a, b| {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .unwrap()
            .then(a.cmp(b))
    });
    c.iter().position(|&i| i == positive).unwrap() + 1
}

fn reference_metrics(rank: usize, cutoffs: &[usize]) -> (Vec<f64>, Vec<f64>, f64) {
    let recall = cutoffs.iter().map(|&k| if rank <= k { 1.0 } else { 0.0 }).collect();
    let ndcg = cutoffs
        .iter()
        .map(|&k| if rank <= k { 1.0 / (1.0 + rank as f64).log2() } else { 0.0 })
        .collect();
    (recall, ndcg, 1.0 / rank as f64)
}

fn matches(m: &ModeMetrics, u: usize, rank: usize) -> bool {
    let (recall, ndcg, mrr) = reference_metrics(rank, &m.cutoffs);
    m.ranks[u] == rank
        && m.mrr[u].to_bits() == mrr.to_bits()
        && (0..m.cutoffs.len()).all(|k| {
            m.recall[k][u].to_bits() == recall[k].to_bits() && m.ndcg[k][u].to_bits() == ndcg[k].to_bits()
        })
}

fn c3_metric_oracle() -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0usize;
    for instance in 0..1000 {
        let v = rng.random_range(2..=50usize);
        let num_users = rng.random_range(1..=4usize);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for _ in 0..num_users {
            let len = rng.random_range(1..=v.min(12));
            train.push((0..len).map(|_| rng.random_range(1..=v as ItemId)).collect::<Vec<_>>());
            test.push(rng.random_range(1..=v as ItemId));
        }
        let split = SplitDataset {
            train,
            test,
            validation: BTreeMap::new(),
            val_user_seed: 0,
            num_items: v,
            user_names: (0..num_users).map(|u| u.to_string()).collect(),
        };
        let mut counts: Vec<u64> = (0..v).map(|_| rng.random_range(0..5u64)).collect();
        counts[0] += 1;
        let pop = PopularityTable::from_counts(counts).map_err(|e| e.to_string())?;
        let exclude_history = rng.random_bool(0.5);
        let eligible = (0..num_users)
            .map(|u| {
                let banned: HashSet<ItemId> = if exclude_history {
                    split.train[u].iter().copied().collect()
                } else {
                    HashSet::new()
                };
                (1..=v as ItemId)
                    .filter(|&i| pop.count(i) > 0 && i != split.test[u] && !banned.contains(&i))
                    .count()
            })
            .min()
            .unwrap();
        let mode = if eligible == 0 { EvalMode::Unsampled } else { EvalMode::Both };
        let cfg = EvalConfig {
            mode,
            cutoffs: vec![1, 3, 5, 10],
            num_negatives: eligible.clamp(1, 100).min(rng.random_range(1..=eligible.max(1))),
            exclude_history,
            seed: rng.random(),
        };
        // coarse scores so ties are common
        let scores: Vec<Vec<f64>> = (0..num_users)
            .map(|_| (0..v + 2).map(|_| rng.random_range(0..6) as f64 * 0.25).collect())
            .collect();
        let report = evaluate_with(&split, &pop, &cfg, |users, _| {
            Ok(users.iter().map(|&u| scores[u].clone()).collect())
        })
        .map_err(|e| format!("instance {instance}: {e}"))?;

        for u in 0..num_users {
            let positive = split.test[u];
            let history: &[ItemId] = if exclude_history { &split.train[u] } else { &[] };
            let all: Vec<ItemId> = (1..=v as ItemId)
                .filter(|i| *i == positive || !history.contains(i))
                .collect();
            let rank = reference_rank(&scores[u], &all, positive);
            if !matches(report.unsampled.as_ref().unwrap(), u, rank) {
                return Ok(Verdict::Fail(format!("instance {instance} user {u}: unsampled mismatch")));
            }
            compared += 1;
            if let Some(m) = report.sampled.as_ref() {
                let mut urng = cfg.user_rng(u);
                let mut cands = sample_popularity_negatives(&pop, positive, history, cfg.num_negatives, &mut urng)
                    .map_err(|e| e.to_string())?;
                cands.push(positive);
                let rank = reference_rank(&scores[u], &cands, positive);
                if !matches(m, u, rank) {
                    return Ok(Verdict::Fail(format!("instance {instance} user {u}: sampled mismatch")));
                }
                compared += 1;
            }
        }
    }
    Ok(Verdict::Pass(format!("1000 instances, {compared} user rankings bit-identical")))
}

fn c4_gradients() -> Checked {
    let ds = cyclic_dataset(10, 12, 8).map_err(|e| e.to_string())?;
    let split = leave_one_out_split(&ds, 3, 7).map_err(|e| e.to_string())?;
    let grad_check = GradCheck {
        step: 1e-5,
        max_coords_per_tensor: 8,
    };
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, kind) in ModelKind::ALL.into_iter().enumerate() {
        let mut mc = ModelConfig::defaults(kind);
        mc.max_seq_len = 8;
        mc.hidden_size = 8;
        mc.embedding_size = if kind == ModelKind::Albert4Rec { 4 } else { 8 };
        mc.num_heads = 2;
        mc.num_blocks = 1 + i % 2;
        mc.dropout = 0.0;
        mc.latent_dim = 8;
        let model = build_model::<f64>(mc, split.num_items, split.num_users(), 11)
            .map_err(|e| e.to_string())?;
        let mut tc = TrainConfig::defaults_for(kind);
        tc.batch_size = 4;
        let report = check_training_gradients(&model, &split, &tc, &[0, 4, 7], 3, &grad_check)
            .map_err(|e| format!("{kind}: {e}"))?;
        worst = worst.max(report.max_rel_error);
        parts.push(format!("{kind} {:.1e}", report.max_rel_error));
    }
    Ok(check(worst <= 1e-3, format!("max relative error per kind: {}", parts.join(", "))))
}

fn encoder(model: &Model<f64>) -> &EncoderModel<f64> {
    match model {
        Model::Encoder(m) => m,
        Model::Mf(_) => unreachable!("sequence kinds build encoders"),
    }
}

fn states(m: &EncoderModel<f64>, seq: &[ItemId], mode: AttentionMode) -> Result<Vec<f64>, String> {
    let tape = Tape::new();
    let batch = PaddedBatch::left_padded(&[seq.to_vec()]);
    let out = m.encode(&tape, &batch, mode).map_err(|e| e.to_string())?;
    let data = out.value().data().to_vec();
    Ok(data)
}

fn c5_attention_leakage() -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let len = 8;
    let v = 12;
    let mut causal_checks = 0;
    for seed in 0..4u64 {
        let mut mc = ModelConfig::defaults(ModelKind::SasRec);
        mc.max_seq_len = len;
        mc.hidden_size = 8;
        mc.embedding_size = 8;
        mc.num_heads = 2;
        mc.num_blocks = 1 + seed as usize % 2;
        mc.dropout = 0.0;
        let model = build_model::<f64>(mc, v, 0, seed).map_err(|e| e.to_string())?;
        let m = encoder(&model);
        let h = 8;
        let base: Vec<ItemId> = (0..len).map(|_| rng.random_range(1..=v as ItemId)).collect();
        let a = states(m, &base, AttentionMode::Causal)?;
        for j in 0..len {
            let mut changed = base.clone();
            changed[j] = changed[j] % v as ItemId + 1;
            let b = states(m, &changed, AttentionMode::Causal)?;
            if a[..j * h].iter().zip(&b[..j * h]).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(Verdict::Fail(format!("causal leak from position {j} (seed {seed})")));
            }
            causal_checks += 1;
        }
    }
    let mut mc = ModelConfig::defaults(ModelKind::Bert4Rec);
    mc.max_seq_len = len;
    mc.hidden_size = 8;
    mc.embedding_size = 8;
    mc.num_heads = 2;
    mc.num_blocks = 1;
    mc.dropout = 0.0;
    let model = build_model::<f64>(mc, v, 0, 9).map_err(|e| e.to_string())?;
    let m = encoder(&model);
    let base: Vec<ItemId> = (0..len).map(|_| rng.random_range(1..=v as ItemId)).collect();
    let mut changed = base.clone();
    changed[len - 1] = changed[len - 1] % v as ItemId + 1;
    let a = states(m, &base, AttentionMode::Bidirectional)?;
    let b = states(m, &changed, AttentionMode::Bidirectional)?;
    let moved = a[..(len - 1) * 8]
        .iter()
        .zip(&b[..(len - 1) * 8])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(check(
        moved > 0.0,
        format!("{causal_checks} causal perturbations bitwise clean; bidirectional max change {moved:.2e}"),
    ))
}

fn c6_masking() -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut positions, mut masked, mut empty_rows) = (0usize, 0usize, 0usize);
    let mut rows = 0usize;
    while positions < 100_000 {
        let len = rng.random_range(1..=50usize);
        let pad = rng.random_range(0..5usize);
        let mut seq = vec![0 as ItemId; pad];
        seq.extend((0..len).map(|_| rng.random_range(1..=100 as ItemId)));
        let row = mask_sequence(&seq, 101, 0.2, &mut rng);
        positions += len;
        masked += row.num_masked();
        if row.num_masked() == 0 {
            empty_rows += 1;
        }
        rows += 1;
    }
    let rate = masked as f64 / positions as f64;
    Ok(check(
        (0.19..=0.21).contains(&rate) && empty_rows == 0,
        format!("{positions} positions in {rows} rows, mask rate {rate:.4}, rows without a mask {empty_rows}"),
    ))
}

fn learn(kind: ModelKind, ds: &seqrec::corpus::InteractionDataset, steps: u64, k: usize) -> Result<(f64, f64), String> {
    let split = leave_one_out_split(ds, 2048, 31337).map_err(|e| e.to_string())?;
    let mut model = build_model::<f32>(ModelConfig::defaults(kind), ds.num_items(), ds.num_users(), 5)
        .map_err(|e| e.to_string())?;
    let mut tc = TrainConfig::defaults_for(kind);
    tc.stopping = Stopping::Steps(steps);
    let log = train_model(&mut model, &split, &tc).map_err(|e| e.to_string())?;
    let pop = PopularityTable::from_split(&split, Default::default()).map_err(|e| e.to_string())?;
    let cfg = EvalConfig {
        mode: EvalMode::Unsampled,
        ..EvalConfig::default()
    };
    let report = evaluate_model(&model, &split, &pop, &cfg).map_err(|e| e.to_string())?;
    let recall = report.unsampled.unwrap().mean_recall(k).ok_or("missing cutoff")?;
    Ok((recall, log.total_seconds))
}

fn c7_learnability() -> Checked {
    let cyclic = cyclic_dataset(50, 500, 20).map_err(|e| e.to_string())?;
    let (bert, bt) = learn(ModelKind::Bert4Rec, &cyclic, 400, 1)?;
    let (sas, st) = learn(ModelKind::SasRec, &cyclic, 400, 1)?;
    let zipf = zipf_dataset(200, 1000, 10, 2.0, 7).map_err(|e| e.to_string())?;
    let (mf, mt) = learn(ModelKind::MfBpr, &zipf, 300, 10)?;
    Ok(check(
        bert >= 0.95 && sas >= 0.95 && mf >= 0.5,
        format!(
            "BERT4Rec Recall@1 {bert:.3} ({bt:.0}s), SASRec Recall@1 {sas:.3} ({st:.0}s), MF-BPR Recall@10 {mf:.3} ({mt:.1}s)"
        ),
    ))
}

fn c8_replication_and_significance() -> Checked {
    let hit = replication_check(0.6975, 0.6970).map_err(|e| e.to_string())?;
    let miss = replication_check(0.5215, 0.6970).map_err(|e| e.to_string())?;
    let p = two_tailed_p(2.776, 4.0);
    let a = [0.9, 0.4, 0.75, 0.3, 0.8, 0.55];
    let b = [0.7, 0.5, 0.6, 0.1, 0.65, 0.5];
    let paired = paired_ttest_bonferroni(&a, &b, 1).map_err(|e| e.to_string())?;
    let ok = hit.replicated
        && format!("{:+.2}%", hit.relative_diff * 100.0) == "+0.07%"
        && !miss.replicated
        && format!("{:+.2}%", miss.relative_diff * 100.0) == "-25.18%"
        && (p - 0.05).abs() <= 0.002
        && (paired.raw_p - 0.07056563534883982).abs() < 1e-9;
    Ok(check(
        ok,
        format!(
            "{:+.2}% replicated={}, {:+.2}% replicated={}, p(t=2.776, dof=4)={p:.5}",
            hit.relative_diff * 100.0,
            hit.replicated,
            miss.relative_diff * 100.0,
            miss.replicated
        ),
    ))
}

fn c9_full_replication() -> Checked {
    Ok(Verdict::NotRun(
        "hours-scale job; run scripts/reproduce_ml1m.sh with the ML-1M file".into(),
    ))
}

fn c10_budget_sweep() -> Checked {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/toy_sweep.conf"))
        .map_err(|e| e.to_string())?;
    cfg.output_dir = out.path().to_path_buf();
    let metric = "unsampled.ndcg@10";

    let data = prepare(&cfg).map_err(|e| e.to_string())?;
    let untrained = build_model::<f32>(cfg.model.clone(), data.split.num_items, data.split.num_users(), cfg.seed)
        .map_err(|e| e.to_string())?;
    let base = evaluate_model(&untrained, &data.split, &data.popularity, &cfg.evaluation)
        .map_err(|e| e.to_string())?
        .unsampled
        .ok_or("unsampled metrics missing")?
        .mean_ndcg(10)
        .ok_or("missing cutoff")?;

    sweep_training_budget(&cfg, &[0.5, 1.0, 2.0, 4.0], false).map_err(|e| e.to_string())?;
    let tsv = std::fs::read_to_string(out.path().join(FRONTIER_FILE)).map_err(|e| e.to_string())?;
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty frontier")?.split('\t').collect();
    let col = header.iter().position(|h| *h == metric).ok_or("metric column missing")?;
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split('\t').map(|c| c.parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect();
    let multipliers: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let clock: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let mut values = vec![base];
    values.extend(rows.iter().map(|r| r[col]));
    let non_decreasing = values.windows(2).filter(|w| w[1] >= w[0]).count();
    let clock_ok = clock.windows(2).all(|w| w[1] > w[0]);
    Ok(check(
        multipliers == [0.5, 1.0, 2.0, 4.0] && non_decreasing >= 3 && clock_ok,
        format!(
            "{metric} untrained {:.3} then {}; {non_decreasing}/4 steps non-decreasing; wall clock {}",
            values[0],
            values[1..].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "),
            clock.iter().map(|c| format!("{c:.1}s")).collect::<Vec<_>>().join(" ")
        ),
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Checked); 10] = [
        ("1 dataset stats", c1_ml1m_stats),
        ("2 review table", c2_review_table),
        ("3 metric oracle", c3_metric_oracle),
        ("4 gradients", c4_gradients),
        ("5 attention leakage", c5_attention_leakage),
        ("6 masking statistics", c6_masking),
        ("7 synthetic learnability", c7_learnability),
        ("8 replication and significance", c8_replication_and_significance),
        ("9 full ML-1M replication", c9_full_replication),
        ("10 budget sweep", c10_budget_sweep),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (name, run) in criteria {
        let start = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict::Fail(format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        let line = match &verdict {
            Verdict::Pass(d) => format!("ACCEPTANCE PASS    {name} [{secs:.1}s]: {d}"),
            Verdict::Fail(d) => {
                failed.push(name);
                format!("ACCEPTANCE FAIL    {name} [{secs:.1}s]: {d}")
            }
            Verdict::NotRun(d) => format!("ACCEPTANCE NOT RUN {name}: {d}"),
        };
        writeln!(err, "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
