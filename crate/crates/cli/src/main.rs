use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use seqrec::corpus::{compute_stats, load_interactions, preprocess_min_length, DatasetStats, InputFormat};
use seqrec::review::DEFAULT_MIN_PAPERS;
use seqrec_cli::config::DEFAULT_MIN_LENGTH;
use seqrec_cli::experiment::{self, use_f64};
use seqrec_cli::report::emit_reports;
use seqrec_cli::review_cmd::aggregate_review;
use seqrec_cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Train and evaluate sequential recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics after minimum-length filtering.
    Stats {
        data: PathBuf,
        #[arg(long, default_value = "pairs")]
        format: InputFormat,
        #[arg(long, default_value_t = DEFAULT_MIN_LENGTH)]
        min_length: usize,
    },
    /// Train a model and write the checkpoint and training log.
    Train {
        config: PathBuf,
        /// Extra `key=value` settings applied over the file.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Evaluate a saved checkpoint.
    Evaluate {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Train, evaluate, and check reported values.
    Run {
        config: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Train at several multiples of the base step budget.
    Sweep {
        config: PathBuf,
        /// Comma-separated; defaults to the config's sweep.multipliers.
        #[arg(long, value_delimiter = ',')]
        multipliers: Option<Vec<f64>>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Count outcomes in a comparison CSV.
    AggregateReview {
        csv: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_PAPERS)]
        min_papers: usize,
        /// Also write the table CSV and exact JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge every run under a directory into comparison.csv.
    Report { dir: PathBuf },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Stats {
            data,
            format,
            min_length,
        } => {
            let ds = preprocess_min_length(&load_interactions(&data, format)?, min_length)?;
            println!("{}", DatasetStats::CSV_HEADER);
            println!("{}", compute_stats(&ds).to_csv_row());
        }
        Command::Train { config, set } => {
            let cfg = ExperimentConfig::load_with(&config, &set)?;
            let log = experiment::train_command(&cfg)?;
            eprintln!(
                "trained {} steps in {:.1}s ({}), stopped by {}",
                log.total_steps,
                log.total_seconds,
                if use_f64() { "f64" } else { "f32" },
                log.stop_reason
            );
            println!("{}", cfg.output_dir.join(experiment::CHECKPOINT_FILE).display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            set,
        } => {
            let cfg = ExperimentConfig::load_with(&config, &set)?;
            let record = experiment::evaluate_checkpoint(&cfg, &checkpoint)?;
            print_record(&record);
        }
        Command::Run { config, set } => {
            let cfg = ExperimentConfig::load_with(&config, &set)?;
            let record = experiment::run_experiment(&cfg, true)?;
            print_record(&record);
        }
        Command::Sweep {
            config,
            multipliers,
            set,
        } => {
            let cfg = ExperimentConfig::load_with(&config, &set)?;
            let ms = multipliers.unwrap_or_else(|| cfg.sweep_multipliers.clone());
            let rows = experiment::sweep_training_budget(&cfg, &ms, true)?;
            print!("{}", experiment::frontier_tsv(&rows));
        }
        Command::AggregateReview {
            csv,
            min_papers,
            out,
        } => {
            let table = aggregate_review(&csv, min_papers, out.as_deref())?;
            print!("{}", table.to_csv());
        }
        Command::Report { dir } => {
            print!("{}", emit_reports(&dir)?);
        }
    }
    Ok(())
}

fn print_record(record: &experiment::RunRecord) {
    println!("{}", seqrec::evaluation::TABLE_HEADER);
    println!("{}", record.report.table_row(&record.label, record.train_seconds));
    for v in &record.replication {
        println!(
            "{}: observed {:.4} reported {:.4} ({:+.2}%) {}",
            v.metric,
            v.verdict.observed,
            v.verdict.reported,
            v.verdict.relative_diff * 100.0,
            if v.verdict.replicated { "replicated" } else { "NOT replicated" }
        );
    }
}
