//! Merges finished runs into one comparison table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seqrec::evaluation::paired_ttest_bonferroni;

use crate::experiment::{RunRecord, RUN_JSON};

pub const COMPARISON_FILE: &str = "comparison.csv";

/// Comparison columns: (header, mode, metric).
pub const COLUMNS: [(&str, &str, &str); 4] = [
    ("sampled_recall@10", "sampled", "recall@10"),
    ("sampled_ndcg@10", "sampled", "ndcg@10"),
    ("unsampled_recall@10", "unsampled", "recall@10"),
    ("unsampled_ndcg@10", "unsampled", "ndcg@10"),
];

/// `run.json` in `dir` and in each immediate subdirectory, sorted by path.
pub fn find_runs(dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>> {
    let mut paths = Vec::new();
    let own = dir.join(RUN_JSON);
    if own.is_file() {
        paths.push(own);
    }
    let entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let p = entry?.path().join(RUN_JSON);
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let rec: RunRecord =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok((p, rec))
        })
        .collect()
}

/// Per-user values of one comparison column, if the run computed it.
fn column<'a>(rec: &'a RunRecord, mode: &str, metric: &str) -> Option<&'a [f64]> {
    rec.report.mode(mode)?.metric(metric)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One row per run. For each metric the best run is marked `best`; every
/// other run gets the Bonferroni-corrected p-value of a paired t-test
/// against it (num_tests = runs - 1) and a `*` when significant.
pub fn comparison_table(runs: &[RunRecord]) -> Result<String> {
    if runs.is_empty() {
        bail!("no completed runs to merge");
    }
    let first = &runs[0];
    for r in &runs[1..] {
        if r.user_names != first.user_names {
            bail!(
                "runs '{}' and '{}' were evaluated on different user sets",
                first.label,
                r.label
            );
        }
    }
    let mut header = vec!["model".to_string()];
    for (name, _, _) in COLUMNS {
        header.push(name.into());
        header.push(format!("{name}_p"));
        header.push(format!("{name}_sig"));
    }
    header.push("train_seconds".into());

    let mut cells: Vec<Vec<String>> = runs.iter().map(|r| vec![r.label.clone()]).collect();
    for (_, mode, metric) in COLUMNS {
        let values: Vec<Option<&[f64]>> = runs.iter().map(|r| column(r, mode, metric)).collect();
        let best = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, mean(v))))
            .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
                Some((_, b)) if b >= m => acc,
                _ => Some((i, m)),
            });
        let num_tests = values.iter().filter(|v| v.is_some()).count().saturating_sub(1);
        for (i, v) in values.iter().enumerate() {
            let row = &mut cells[i];
            let Some(v) = v else {
                row.extend([String::new(), String::new(), String::new()]);
                continue;
            };
            row.push(mean(v).to_string());
            match best {
                Some((b, _)) if b == i => {
                    row.push(String::new());
                    row.push(if num_tests > 0 { "best".into() } else { String::new() });
                }
                Some((b, _)) => {
                    let other = values[b].expect("best has values");
                    let sig = paired_ttest_bonferroni(other, v, num_tests)?;
                    row.push(sig.corrected_p.to_string());
                    row.push(if sig.significant { "*".into() } else { String::new() });
                }
                None => unreachable!("a run with values implies a best run"),
            }
        }
    }
    for (row, r) in cells.iter_mut().zip(runs) {
        row.push(r.train_seconds.to_string());
    }
    let mut out = header.join(",");
    out.push('\n');
    for row in cells {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Merges every run under `dir` and writes `comparison.csv` there.
pub fn emit_reports(dir: &Path) -> Result<String> {
    let runs: Vec<RunRecord> = find_runs(dir)?.into_iter().map(|(_, r)| r).collect();
    let table = comparison_table(&runs)?;
    fs::write(dir.join(COMPARISON_FILE), &table)
        .with_context(|| format!("writing {}", dir.join(COMPARISON_FILE).display()))?;
    Ok(table)
}
