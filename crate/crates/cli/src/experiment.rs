//! Ingest, split, train, evaluate and write artifacts for one config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use seqrec::corpus::{
    compute_stats, leave_one_out_split, load_interactions, preprocess_min_length, DatasetStats,
    InteractionDataset, PopularityTable, SplitDataset,
};
use seqrec::evaluation::{
    evaluate_model, replication_check, EvalReport, ReplicationVerdict, TABLE_HEADER,
};
use seqrec::models::{build_model, Model};
use seqrec::synthetic::{cyclic_dataset, zipf_dataset};
use seqrec::training::{train_model_with, EpochRecord, TrainLog};
use seqrec::Scalar;

use crate::config::{DataSource, ExperimentConfig};

/// Set to `1` or `true` to run every model in 64-bit floats.
pub const F64_ENV: &str = "SEQREC_F64";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SIDECAR_SUFFIX: &str = ".config";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const TRAIN_LOG_JSON: &str = "train_log.json";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const RUN_JSON: &str = "run.json";

pub fn use_f64() -> bool {
    std::env::var(F64_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

fn precision_name() -> &'static str {
    if use_f64() {
        "f64"
    } else {
        "f32"
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<InteractionDataset> {
    let ds = match &cfg.data.source {
        DataSource::File { path, format } => load_interactions(path, *format)?,
        DataSource::Cyclic {
            num_items,
            num_users,
            length,
        } => cyclic_dataset(*num_items, *num_users, *length)?,
        DataSource::Zipf {
            num_items,
            num_users,
            length,
            exponent,
            seed,
        } => zipf_dataset(*num_items, *num_users, *length, *exponent, *seed)?,
    };
    Ok(preprocess_min_length(&ds, cfg.data.min_length)?)
}

pub struct Prepared {
    pub stats: DatasetStats,
    pub split: SplitDataset,
    pub popularity: PopularityTable,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let ds = load_dataset(cfg)?;
    let split = leave_one_out_split(&ds, cfg.data.num_val_users, cfg.data.val_seed)?;
    let popularity = PopularityTable::from_split(&split, cfg.popularity)?;
    Ok(Prepared {
        stats: compute_stats(&ds),
        split,
        popularity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedVerdict {
    /// `mode.metric`, e.g. `sampled.recall@10`.
    pub metric: String,
    #[serde(flatten)]
    pub verdict: ReplicationVerdict,
}

/// Everything needed to merge and compare runs later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub model: String,
    pub precision: String,
    pub train_seconds: f64,
    pub total_steps: u64,
    pub user_names: Vec<String>,
    pub report: EvalReport,
    pub replication: Vec<NamedVerdict>,
}

pub fn replication_verdicts(
    report: &EvalReport,
    reported: &BTreeMap<String, f64>,
) -> Result<Vec<NamedVerdict>> {
    reported
        .iter()
        .map(|(name, &value)| {
            let (mode, metric) = name.split_once('.').expect("validated key");
            let observed = report
                .mode(mode)
                .and_then(|m| m.metric(metric))
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .ok_or_else(|| anyhow!("{name} was not computed by this evaluation"))?;
            Ok(NamedVerdict {
                metric: name.clone(),
                verdict: replication_check(observed, value)?,
            })
        })
        .collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_epoch(e: &EpochRecord) {
    let loss = e.val_loss.map_or("-".into(), |l| format!("{l:.6}"));
    eprintln!(
        "epoch {:>5}  steps {:>8}  val_loss {loss}  {:.1}s",
        e.epoch, e.steps, e.cum_seconds
    );
}

/// Builds and trains a fresh model under `cfg`.
pub fn train_fresh<T: Scalar>(
    cfg: &ExperimentConfig,
    split: &SplitDataset,
    verbose: bool,
) -> Result<(Model<T>, TrainLog)> {
    let mut model = build_model::<T>(cfg.model.clone(), split.num_items, split.num_users(), cfg.seed)?;
    let log = train_model_with(&mut model, split, &cfg.training, |e| {
        if verbose {
            print_epoch(e)
        }
    })?;
    Ok((model, log))
}

fn write_training<T: Scalar>(cfg: &ExperimentConfig, model: &Model<T>, log: &TrainLog) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join(EFFECTIVE_CONFIG_FILE), cfg.to_text())?;
    write(&dir.join(TRAIN_LOG_CSV), log.to_csv())?;
    write(&dir.join(TRAIN_LOG_JSON), serde_json::to_string_pretty(log)?)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    model.save_parameters(&ckpt)?;
    write(&sidecar_path(&ckpt), cfg.to_text())?;
    Ok(())
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(SIDECAR_SUFFIX);
    PathBuf::from(s)
}

fn evaluate_into_record<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &Prepared,
    model: &Model<T>,
    log: Option<&TrainLog>,
) -> Result<RunRecord> {
    let report = evaluate_model(model, &data.split, &data.popularity, &cfg.evaluation)?;
    let replication = replication_verdicts(&report, &cfg.reported)?;
    Ok(RunRecord {
        label: cfg.label.clone(),
        model: cfg.model.kind.to_string(),
        precision: precision_name().into(),
        train_seconds: log.map_or(0.0, |l| l.total_seconds),
        total_steps: log.map_or(0, |l| l.total_steps),
        user_names: data.split.user_names.clone(),
        report,
        replication,
    })
}

#[derive(Serialize)]
struct EvalJson<'a> {
    label: &'a str,
    model: &'a str,
    train_seconds: f64,
    summary: seqrec::evaluation::ReportSummary,
    replication: &'a [NamedVerdict],
}

pub fn write_evaluation(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let summary = EvalJson {
        label: &record.label,
        model: &record.model,
        train_seconds: record.train_seconds,
        summary: record.report.summary(),
        replication: &record.replication,
    };
    write(&dir.join(EVAL_JSON), serde_json::to_string_pretty(&summary)?)?;
    write(
        &dir.join(EVAL_CSV),
        format!(
            "{TABLE_HEADER}\n{}\n",
            record.report.table_row(&record.label, record.train_seconds)
        ),
    )?;
    write(&dir.join(RUN_JSON), serde_json::to_string(record)?)?;
    Ok(())
}

/// Trains under `cfg` and writes the training artifacts.
pub fn train_command(cfg: &ExperimentConfig) -> Result<TrainLog> {
    fn go<T: Scalar>(cfg: &ExperimentConfig) -> Result<TrainLog> {
        let data = prepare(cfg)?;
        let (model, log) = train_fresh::<T>(cfg, &data.split, true)?;
        write_training(cfg, &model, &log)?;
        Ok(log)
    }
    if use_f64() {
        go::<f64>(cfg)
    } else {
        go::<f32>(cfg)
    }
}

/// Train, evaluate, and write every artifact.
pub fn run_experiment(cfg: &ExperimentConfig, verbose: bool) -> Result<RunRecord> {
    fn go<T: Scalar>(cfg: &ExperimentConfig, verbose: bool) -> Result<RunRecord> {
        let data = prepare(cfg)?;
        let (model, log) = train_fresh::<T>(cfg, &data.split, verbose)?;
        write_training(cfg, &model, &log)?;
        let record = evaluate_into_record(cfg, &data, &model, Some(&log))?;
        write_evaluation(&cfg.output_dir, &record)?;
        Ok(record)
    }
    if use_f64() {
        go::<f64>(cfg, verbose)
    } else {
        go::<f32>(cfg, verbose)
    }
}

/// Evaluates a saved checkpoint. The training log beside it, if any,
/// supplies the training time.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: &Path) -> Result<RunRecord> {
    fn go<T: Scalar>(cfg: &ExperimentConfig, ckpt: &Path) -> Result<RunRecord> {
        let data = prepare(cfg)?;
        let mut model =
            build_model::<T>(cfg.model.clone(), data.split.num_items, data.split.num_users(), cfg.seed)?;
        model
            .load_parameters(ckpt)
            .with_context(|| format!("loading {}", ckpt.display()))?;
        let log_path = ckpt.with_file_name(TRAIN_LOG_JSON);
        let log: Option<TrainLog> = fs::read_to_string(&log_path)
            .ok()
            .map(|s| serde_json::from_str(&s))
            .transpose()
            .with_context(|| format!("reading {}", log_path.display()))?;
        let record = evaluate_into_record(cfg, &data, &model, log.as_ref())?;
        write_evaluation(&cfg.output_dir, &record)?;
        Ok(record)
    }
    if use_f64() {
        go::<f64>(cfg, ckpt)
    } else {
        go::<f32>(cfg, ckpt)
    }
}

/// One frontier row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub multiplier: f64,
    pub steps: u64,
    pub wall_clock_s: f64,
    /// `mode.metric` to mean value.
    pub metrics: BTreeMap<String, f64>,
    /// Whether every reported value was replicated; absent without any.
    pub gate: Option<bool>,
}

pub const FRONTIER_FILE: &str = "frontier.tsv";

/// Trains a fresh model for each multiple of the base budget, in ascending
/// order, and writes `frontier.tsv`.
pub fn sweep_training_budget(
    cfg: &ExperimentConfig,
    multipliers: &[f64],
    verbose: bool,
) -> Result<Vec<SweepRow>> {
    if multipliers.is_empty() {
        bail!("multiplier list is empty");
    }
    if multipliers.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
        bail!("multipliers must be positive and finite");
    }
    let mut ms = multipliers.to_vec();
    ms.sort_by(f64::total_cmp);
    if ms.windows(2).any(|w| w[0] == w[1]) {
        bail!("multipliers must be distinct");
    }
    let data = prepare(cfg)?;
    let mut rows = Vec::with_capacity(ms.len());
    for &m in &ms {
        let steps = ((m * cfg.sweep_base_steps as f64).round() as u64).max(1);
        let mut entry = cfg.clone();
        entry.training.stopping = seqrec::training::Stopping::Steps(steps);
        if verbose {
            eprintln!("sweep: multiplier {m} ({steps} steps)");
        }
        let record = if use_f64() {
            let (model, log) = train_fresh::<f64>(&entry, &data.split, false)?;
            evaluate_into_record(&entry, &data, &model, Some(&log))?
        } else {
            let (model, log) = train_fresh::<f32>(&entry, &data.split, false)?;
            evaluate_into_record(&entry, &data, &model, Some(&log))?
        };
        let mut metrics = BTreeMap::new();
        for (mode, mm) in [
            ("sampled", record.report.sampled.as_ref()),
            ("unsampled", record.report.unsampled.as_ref()),
        ] {
            if let Some(mm) = mm {
                for (name, v) in mm.means() {
                    metrics.insert(format!("{mode}.{name}"), v);
                }
            }
        }
        let gate = (!record.replication.is_empty())
            .then(|| record.replication.iter().all(|v| v.verdict.replicated));
        rows.push(SweepRow {
            multiplier: m,
            steps,
            wall_clock_s: record.train_seconds,
            metrics,
            gate,
        });
    }
    fs::create_dir_all(&cfg.output_dir)?;
    write(&cfg.output_dir.join(EFFECTIVE_CONFIG_FILE), cfg.to_text())?;
    write(&cfg.output_dir.join(FRONTIER_FILE), frontier_tsv(&rows))?;
    Ok(rows)
}

pub fn frontier_tsv(rows: &[SweepRow]) -> String {
    let names: Vec<&String> = rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
    let with_gate = rows.iter().any(|r| r.gate.is_some());
    let mut out = String::from("multiplier\tsteps\twall_clock_s");
    for n in &names {
        out.push('\t');
        out.push_str(n);
    }
    if with_gate {
        out.push_str("\treplicated");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}", r.multiplier, r.steps, r.wall_clock_s));
        for n in &names {
            out.push_str(&format!("\t{}", r.metrics[*n]));
        }
        if with_gate {
            out.push_str(&format!("\t{}", r.gate.unwrap_or(false)));
        }
        out.push('\n');
    }
    out
}
