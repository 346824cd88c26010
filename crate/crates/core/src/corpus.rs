//! Interaction ingestion, preprocessing, leave-one-out splitting and
//! popularity statistics.
//!
//! Internal item ids are contiguous in `1..=V`. Id `0` is padding and
//! `V + 1` is the mask token, so embedding tables have `V + 2` rows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = u32;

pub const PAD_ID: ItemId = 0;

/// Validation users drawn by default.
pub const DEFAULT_NUM_VAL_USERS: usize = 2048;
/// Default seed for the validation user draw; the same users are used on every run.
pub const DEFAULT_VAL_SEED: u64 = 31337;

/// One user-item event at a 0-based chronological position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// `user item` per line, already chronological within a user.
    PairPerLine,
    /// `user,item,timestamp` with a header row.
    CsvWithTimestamp,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" | "pair_per_line" | "pair-per-line" => Ok(InputFormat::PairPerLine),
            "csv" | "csv_with_timestamp" | "csv-with-timestamp" => {
                Ok(InputFormat::CsvWithTimestamp)
            }
            other => Err(Error::Config(format!("unknown data format '{other}'"))),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputFormat::PairPerLine => f.write_str("pairs"),
            InputFormat::CsvWithTimestamp => f.write_str("csv"),
        }
    }
}

/// Per-user chronological item sequences over a compact vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    users: Vec<String>,
    sequences: Vec<Vec<ItemId>>,
    items: Vec<String>,
    item_index: HashMap<String, ItemId>,
}

impl InteractionDataset {
    /// Builds a dataset from ordered `(user, items)` pairs, assigning item ids
    /// in first-appearance order.
    pub fn from_sequences<U, I, S>(rows: impl IntoIterator<Item = (U, I)>) -> Result<Self>
    where
        U: Into<String>,
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut users = Vec::new();
        let mut sequences = Vec::new();
        let mut items: Vec<String> = Vec::new();
        let mut item_index = HashMap::new();
        for (user, seq) in rows {
            let ids: Vec<ItemId> = seq
                .into_iter()
                .map(|name| {
                    let name = name.as_ref();
                    *item_index.entry(name.to_string()).or_insert_with(|| {
                        items.push(name.to_string());
                        items.len() as ItemId
                    })
                })
                .collect();
            if ids.is_empty() {
                continue;
            }
            users.push(user.into());
            sequences.push(ids);
        }
        if users.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(InteractionDataset {
            users,
            sequences,
            items,
            item_index,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// `V`, the number of real items.
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn mask_id(&self) -> ItemId {
        self.items.len() as ItemId + 1
    }

    pub fn user_name(&self, user: usize) -> &str {
        &self.users[user]
    }

    pub fn user_names(&self) -> &[String] {
        &self.users
    }

    pub fn sequence(&self, user: usize) -> &[ItemId] {
        &self.sequences[user]
    }

    pub fn sequences(&self) -> &[Vec<ItemId>] {
        &self.sequences
    }

    pub fn item_id(&self, name: &str) -> Option<ItemId> {
        self.item_index.get(name).copied()
    }

    pub fn item_name(&self, id: ItemId) -> Option<&str> {
        if id == PAD_ID {
            return None;
        }
        self.items.get(id as usize - 1).map(String::as_str)
    }

    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        self.users
            .iter()
            .zip(&self.sequences)
            .flat_map(move |(user, seq)| {
                seq.iter()
                    .enumerate()
                    .map(move |(position, &id)| Interaction {
                        user: user.clone(),
                        item: self.items[id as usize - 1].clone(),
                        position,
                    })
            })
    }
}

/// Reads interactions from `path`.
pub fn load_interactions(
    path: impl AsRef<Path>,
    format: InputFormat,
) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        InputFormat::PairPerLine => read_pairs(reader, path),
        InputFormat::CsvWithTimestamp => read_csv(reader),
    }
}

fn read_pairs(reader: impl BufRead, path: &Path) -> Result<InteractionDataset> {
    let mut order: Vec<String> = Vec::new();
    let mut by_user: HashMap<String, Vec<String>> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (Some(user), Some(item), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 'user item', got '{trimmed}'"),
            });
        };
        by_user
            .entry(user.to_string())
            .or_insert_with(|| {
                order.push(user.to_string());
                Vec::new()
            })
            .push(item.to_string());
    }
    let rows = order.into_iter().map(|u| {
        let seq = by_user.remove(&u).unwrap_or_default();
        (u, seq)
    });
    InteractionDataset::from_sequences(rows)
}

fn read_csv(reader: impl std::io::Read) -> Result<InteractionDataset> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let expected = ["user", "item", "timestamp"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header user,item,timestamp, got {headers:?}"),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_user: HashMap<String, Vec<(i64, usize, String)>> = HashMap::new();
    for (idx, record) in csv.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let ts: i64 = record[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad timestamp '{}'", &record[2]),
        })?;
        let user = record[0].to_string();
        by_user
            .entry(user.clone())
            .or_insert_with(|| {
                order.push(user);
                Vec::new()
            })
            .push((ts, idx, record[1].to_string()));
    }
    let rows = order.into_iter().map(|u| {
        let mut events = by_user.remove(&u).unwrap_or_default();
        // ties fall back to input order
        events.sort_by_key(|(ts, idx, _)| (*ts, *idx));
        (
            u,
            events
                .into_iter()
                .map(|(_, _, item)| item)
                .collect::<Vec<_>>(),
        )
    });
    InteractionDataset::from_sequences(rows)
}

/// Drops users with fewer than `min_len` interactions and re-compacts the
/// vocabulary, keeping the relative order of surviving item ids.
pub fn preprocess_min_length(
    ds: &InteractionDataset,
    min_len: usize,
) -> Result<InteractionDataset> {
    if min_len == 0 {
        return Err(Error::Contract("min_len must be at least 1".into()));
    }
    let kept: Vec<usize> = (0..ds.num_users())
        .filter(|&u| ds.sequences[u].len() >= min_len)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut used = vec![false; ds.num_items() + 1];
    for &u in &kept {
        for &i in &ds.sequences[u] {
            used[i as usize] = true;
        }
    }
    let mut remap = vec![PAD_ID; ds.num_items() + 1];
    let mut items = Vec::new();
    let mut item_index = HashMap::new();
    for old in 1..=ds.num_items() {
        if used[old] {
            let name = ds.items[old - 1].clone();
            items.push(name.clone());
            let new_id = items.len() as ItemId;
            item_index.insert(name, new_id);
            remap[old] = new_id;
        }
    }
    let users = kept.iter().map(|&u| ds.users[u].clone()).collect();
    let sequences = kept
        .iter()
        .map(|&u| ds.sequences[u].iter().map(|&i| remap[i as usize]).collect())
        .collect();
    Ok(InteractionDataset {
        users,
        sequences,
        items,
        item_index,
    })
}

/// Leave-one-out partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Vec<ItemId>>,
    pub test: Vec<ItemId>,
    /// Validation user index to its second-last item.
    pub validation: BTreeMap<usize, ItemId>,
    pub val_user_seed: u64,
    pub num_items: usize,
    pub user_names: Vec<String>,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    pub fn mask_id(&self) -> ItemId {
        self.num_items as ItemId + 1
    }

    /// `train ++ [validation] ++ [test]`, the original sequence of `user`.
    pub fn full_sequence(&self, user: usize) -> Vec<ItemId> {
        let mut seq = self.train[user].clone();
        if let Some(&v) = self.validation.get(&user) {
            seq.push(v);
        }
        seq.push(self.test[user]);
        seq
    }

    /// Everything the model may see before predicting the test item.
    pub fn test_history(&self, user: usize) -> Vec<ItemId> {
        let mut seq = self.train[user].clone();
        if let Some(&v) = self.validation.get(&user) {
            seq.push(v);
        }
        seq
    }

    pub fn num_train_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

pub fn leave_one_out_split(
    ds: &InteractionDataset,
    num_val_users: usize,
    seed: u64,
) -> Result<SplitDataset> {
    for (u, seq) in ds.sequences.iter().enumerate() {
        if seq.len() < 3 {
            return Err(Error::SequenceTooShort {
                user: ds.users[u].clone(),
                len: seq.len(),
                needed: 3,
            });
        }
    }
    let n = ds.num_users();
    let k = num_val_users.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let val_users = rand::seq::index::sample(&mut rng, n, k);

    let mut validation = BTreeMap::new();
    for u in val_users.iter() {
        let seq = &ds.sequences[u];
        validation.insert(u, seq[seq.len() - 2]);
    }
    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(n);
    for (u, seq) in ds.sequences.iter().enumerate() {
        let held = if validation.contains_key(&u) { 2 } else { 1 };
        train.push(seq[..seq.len() - held].to_vec());
        test.push(seq[seq.len() - 1]);
    }
    Ok(SplitDataset {
        train,
        test,
        validation,
        val_user_seed: seed,
        num_items: ds.num_items(),
        user_names: ds.users.clone(),
    })
}

/// Summary statistics in the column order users, items, interactions,
/// avg_len, sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    pub sparsity: f64,
}

impl DatasetStats {
    pub const CSV_HEADER: &'static str = "users,items,interactions,avg_len,sparsity";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.users, self.items, self.interactions, self.avg_len, self.sparsity
        )
    }
}

pub fn compute_stats(ds: &InteractionDataset) -> DatasetStats {
    let users = ds.num_users();
    let items = ds.num_items();
    let interactions = ds.num_interactions();
    DatasetStats {
        users,
        items,
        interactions,
        avg_len: interactions as f64 / users as f64,
        sparsity: 1.0 - interactions as f64 / (users as f64 * items as f64),
    }
}

/// Which interactions feed the popularity counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularitySource {
    /// Training interactions only; held-out items are not counted.
    #[default]
    Train,
    /// Every interaction, held-out ones included.
    Full,
}

impl std::str::FromStr for PopularitySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(PopularitySource::Train),
            "full" => Ok(PopularitySource::Full),
            other => Err(Error::Config(format!(
                "unknown popularity source '{other}'"
            ))),
        }
    }
}

/// Per-item interaction counts with an integer cumulative table for
/// popularity-proportional draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    counts: Vec<u64>,
    cumulative: Vec<u64>,
    total: u64,
}

impl PopularityTable {
    /// `counts[i - 1]` is the count of item `i`.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let mut padded = Vec::with_capacity(counts.len() + 1);
        padded.push(0);
        padded.extend(counts);
        let mut cumulative = Vec::with_capacity(padded.len());
        let mut acc = 0u64;
        for &c in &padded {
            acc += c;
            cumulative.push(acc);
        }
        if acc == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(PopularityTable {
            counts: padded,
            cumulative,
            total: acc,
        })
    }

    pub fn from_split(split: &SplitDataset, source: PopularitySource) -> Result<Self> {
        let mut counts = vec![0u64; split.num_items];
        let mut bump = |i: ItemId| counts[i as usize - 1] += 1;
        for seq in &split.train {
            seq.iter().copied().for_each(&mut bump);
        }
        if source == PopularitySource::Full {
            split.validation.values().copied().for_each(&mut bump);
            split.test.iter().copied().for_each(&mut bump);
        }
        Self::from_counts(counts)
    }

    pub fn num_items(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn count(&self, item: ItemId) -> u64 {
        self.counts.get(item as usize).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn probability(&self, item: ItemId) -> f64 {
        self.count(item) as f64 / self.total as f64
    }

    /// One item drawn with probability proportional to its count.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ItemId {
        let r = rng.random_range(0..self.total);
        // first index whose cumulative count exceeds r
        self.cumulative.partition_point(|&c| c <= r) as ItemId
    }
}

/// Counts over every interaction in `ds`.
pub fn build_popularity_table(ds: &InteractionDataset) -> Result<PopularityTable> {
    let mut counts = vec![0u64; ds.num_items()];
    for seq in &ds.sequences {
        for &i in seq {
            counts[i as usize - 1] += 1;
        }
    }
    PopularityTable::from_counts(counts)
}
