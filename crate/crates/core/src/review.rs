//! Win/tie counting over BERT4Rec-vs-SASRec comparison records.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_PAPERS: usize = 5;
pub const TOTAL_LABEL: &str = "Total";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Bert4RecWins,
    SasRecWins,
    Tie,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Bert4RecWins, Outcome::SasRecWins, Outcome::Tie];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Bert4RecWins => "bert4rec_wins",
            Outcome::SasRecWins => "sasrec_wins",
            Outcome::Tie => "tie",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown outcome '{s}'"))
    }
}

/// A model wins only when it is better on every metric; anything else is a
/// tie. Metric vectors are aligned and higher is better.
pub fn derive_outcome(bert4rec: &[f64], sasrec: &[f64]) -> Result<Outcome> {
    if bert4rec.len() != sasrec.len() || bert4rec.is_empty() {
        return Err(Error::Contract(
            "metric vectors must be non-empty and aligned".into(),
        ));
    }
    let pairs = || bert4rec.iter().zip(sasrec);
    Ok(if pairs().all(|(b, s)| b > s) {
        Outcome::Bert4RecWins
    } else if pairs().all(|(b, s)| s > b) {
        Outcome::SasRecWins
    } else {
        Outcome::Tie
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub paper_id: String,
    pub dataset: String,
    pub outcome: Outcome,
}

#[derive(Deserialize)]
struct RawRecord {
    paper_id: String,
    dataset: String,
    outcome: String,
}

pub fn load_comparisons(path: impl AsRef<Path>) -> Result<Vec<ComparisonRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_comparisons(file)
}

/// Reads `paper_id,dataset,outcome` rows. Line numbers in errors count the
/// header as line 1.
pub fn parse_comparisons(reader: impl std::io::Read) -> Result<Vec<ComparisonRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["paper_id", "dataset", "outcome"] {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header paper_id,dataset,outcome".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RawRecord>().enumerate() {
        let line = i + 2;
        let raw = row.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let outcome = raw
            .outcome
            .parse()
            .map_err(|msg| Error::Parse { line, msg })?;
        if !seen.insert((raw.paper_id.clone(), raw.dataset.clone())) {
            return Err(Error::Integrity(format!(
                "duplicate record ({}, {}) at line {line}",
                raw.paper_id, raw.dataset
            )));
        }
        out.push(ComparisonRecord {
            paper_id: raw.paper_id,
            dataset: raw.dataset,
            outcome,
        });
    }
    Ok(out)
}

/// Counts for one dataset (or the total), with contributing papers per
/// outcome in input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub dataset: String,
    pub total: usize,
    /// Indexed like [`Outcome::ALL`].
    pub counts: [usize; 3],
    pub papers: [Vec<String>; 3],
}

impl OutcomeRow {
    fn new(dataset: &str) -> Self {
        OutcomeRow {
            dataset: dataset.to_string(),
            total: 0,
            counts: [0; 3],
            papers: Default::default(),
        }
    }

    fn add(&mut self, r: &ComparisonRecord) {
        self.total += 1;
        self.counts[r.outcome.index()] += 1;
        self.papers[r.outcome.index()].push(r.paper_id.clone());
    }

    pub fn count(&self, o: Outcome) -> usize {
        self.counts[o.index()]
    }

    pub fn fraction(&self, o: Outcome) -> f64 {
        self.count(o) as f64 / self.total as f64
    }

    /// Integer percentage, halves rounded up.
    pub fn percent(&self, o: Outcome) -> usize {
        (200 * self.count(o) + self.total) / (2 * self.total)
    }

    /// Integer percentage with the fraction dropped.
    pub fn percent_truncated(&self, o: Outcome) -> usize {
        100 * self.count(o) / self.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub min_papers: usize,
    /// Datasets with at least `min_papers` records, largest first.
    pub rows: Vec<OutcomeRow>,
    /// Every record, filtered datasets included.
    pub total: OutcomeRow,
    /// Number of distinct datasets before filtering.
    pub num_datasets: usize,
}

/// Fractions and both percentage conventions for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactCell {
    pub count: usize,
    pub total: usize,
    pub fraction: f64,
    pub percent_half_up: usize,
    pub percent_truncated: usize,
}

pub fn aggregate_outcomes(records: &[ComparisonRecord], min_papers: usize) -> Result<OutcomeTable> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_dataset: BTreeMap<&str, OutcomeRow> = BTreeMap::new();
    let mut total = OutcomeRow::new(TOTAL_LABEL);
    for r in records {
        by_dataset
            .entry(&r.dataset)
            .or_insert_with(|| OutcomeRow::new(&r.dataset))
            .add(r);
        total.add(r);
    }
    let num_datasets = by_dataset.len();
    let mut rows: Vec<OutcomeRow> = by_dataset
        .into_values()
        .filter(|row| row.total >= min_papers)
        .collect();
    for row in rows.iter_mut().chain(std::iter::once(&mut total)) {
        row.papers.iter_mut().for_each(|p| p.sort());
    }
    // stable sort keeps dataset-name order among equal totals
    rows.sort_by(|a, b| b.total.cmp(&a.total));
    Ok(OutcomeTable {
        min_papers,
        rows,
        total,
        num_datasets,
    })
}

impl OutcomeTable {
    pub const CSV_HEADER: &'static str = "dataset,total,bert4rec_wins,bert4rec_wins_pct,sasrec_wins,sasrec_wins_pct,ties,ties_pct,bert4rec_wins_papers,sasrec_wins_papers,ties_papers";

    /// Table rows then the total; percentages half-up, papers `;`-joined.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            let mut cells = vec![row.dataset.clone(), row.total.to_string()];
            for o in Outcome::ALL {
                cells.push(row.count(o).to_string());
                cells.push(row.percent(o).to_string());
            }
            for o in Outcome::ALL {
                cells.push(row.papers[o.index()].join(";"));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Dataset to outcome to exact cell, total included.
    pub fn exact(&self) -> BTreeMap<String, BTreeMap<String, ExactCell>> {
        self.rows
            .iter()
            .chain(std::iter::once(&self.total))
            .map(|row| {
                let cells = Outcome::ALL
                    .into_iter()
                    .map(|o| {
                        let cell = ExactCell {
                            count: row.count(o),
                            total: row.total,
                            fraction: row.fraction(o),
                            percent_half_up: row.percent(o),
                            percent_truncated: row.percent_truncated(o),
                        };
                        (o.as_str().to_string(), cell)
                    })
                    .collect();
                (row.dataset.clone(), cells)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: &str, d: &str, o: Outcome) -> ComparisonRecord {
        ComparisonRecord {
            paper_id: p.into(),
            dataset: d.into(),
            outcome: o,
        }
    }

    #[test]
    fn parses_one_row() {
        let recs = parse_comparisons("paper_id,dataset,outcome\np1,ML-1M,tie\n".as_bytes()).unwrap();
        assert_eq!(recs, vec![rec("p1", "ML-1M", Outcome::Tie)]);
    }

    #[test]
    fn rejects_duplicates_and_bad_tokens() {
        let dup = "paper_id,dataset,outcome\np1,ML-1M,tie\np1,ML-1M,sasrec_wins\n";
        assert!(matches!(
            parse_comparisons(dup.as_bytes()),
            Err(Error::Integrity(_))
        ));
        let bad = "paper_id,dataset,outcome\np1,ML-1M,tie\np2,ML-1M,draw\n";
        assert!(matches!(
            parse_comparisons(bad.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        let header = "paper,dataset,outcome\np1,ML-1M,tie\n";
        assert!(matches!(
            parse_comparisons(header.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn single_record_is_all_one_outcome() {
        let t = aggregate_outcomes(&[rec("p", "d", Outcome::SasRecWins)], 1).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].percent(Outcome::SasRecWins), 100);
        assert_eq!(t.rows[0].percent(Outcome::Tie), 0);
        let t = aggregate_outcomes(&[rec("p", "d", Outcome::SasRecWins)], 5).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.total.total, 1);
    }

    #[test]
    fn rounding_conventions() {
        let mut row = OutcomeRow::new("x");
        row.total = 134;
        row.counts = [86, 32, 16];
        assert_eq!(row.percent(Outcome::Bert4RecWins), 64);
        assert_eq!(row.percent(Outcome::SasRecWins), 24);
        assert_eq!(row.percent_truncated(Outcome::SasRecWins), 23);
        row.total = 8;
        row.counts = [7, 1, 0];
        // 12.5 rounds up
        assert_eq!(row.percent(Outcome::SasRecWins), 13);
    }

    #[test]
    fn ordering_and_filtering() {
        let mut recs = Vec::new();
        for i in 0..6 {
            recs.push(rec(&format!("a{i}"), "A", Outcome::Tie));
        }
        for i in 0..7 {
            recs.push(rec(&format!("b{i}"), "B", Outcome::Bert4RecWins));
        }
        recs.push(rec("c", "C", Outcome::SasRecWins));
        let t = aggregate_outcomes(&recs, 5).unwrap();
        let names: Vec<&str> = t.rows.iter().map(|r| r.dataset.as_str()).collect();
        assert_eq!(names, ["B", "A"]);
        assert_eq!(t.total.total, 14);
        assert_eq!(t.num_datasets, 3);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("Total,14,7,50,1,7,6,43,"));
    }

    #[test]
    fn outcome_from_metrics() {
        assert_eq!(derive_outcome(&[0.5, 0.3], &[0.4, 0.2]).unwrap(), Outcome::Bert4RecWins);
        assert_eq!(derive_outcome(&[0.3, 0.3], &[0.4, 0.4]).unwrap(), Outcome::SasRecWins);
        assert_eq!(derive_outcome(&[0.5, 0.1], &[0.4, 0.2]).unwrap(), Outcome::Tie);
        assert_eq!(derive_outcome(&[0.5], &[0.5]).unwrap(), Outcome::Tie);
        assert!(derive_outcome(&[0.5], &[]).is_err());
    }
}
