//! Review aggregation outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use seqrec::review::{aggregate_outcomes, load_comparisons, OutcomeTable};

pub const TABLE_FILE: &str = "review_table.csv";
pub const EXACT_FILE: &str = "review_exact.json";

/// Aggregates `csv` and, when `out_dir` is given, writes the table CSV and
/// the exact-fraction JSON there.
pub fn aggregate_review(csv: &Path, min_papers: usize, out_dir: Option<&Path>) -> Result<OutcomeTable> {
    let records = load_comparisons(csv)?;
    let table = aggregate_outcomes(&records, min_papers)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(TABLE_FILE), table.to_csv())?;
        fs::write(
            dir.join(EXACT_FILE),
            serde_json::to_string_pretty(&table.exact())?,
        )?;
    }
    Ok(table)
}
