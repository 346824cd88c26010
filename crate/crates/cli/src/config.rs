//! Flat `key = value` experiment configuration with section prefixes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use seqrec::corpus::{InputFormat, PopularitySource, DEFAULT_NUM_VAL_USERS, DEFAULT_VAL_SEED};
use seqrec::evaluation::{EvalConfig, EvalMode};
use seqrec::models::{ModelConfig, ModelKind};
use seqrec::training::{Stopping, TrainConfig};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MIN_LENGTH: usize = 5;
pub const DEFAULT_SWEEP_BASE_STEPS: u64 = 400_000;
pub const DEFAULT_SWEEP_MULTIPLIERS: [f64; 7] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File { path: PathBuf, format: InputFormat },
    /// Every user walks the item cycle from a user-dependent start.
    Cyclic {
        num_items: usize,
        num_users: usize,
        length: usize,
    },
    /// Distinct items per user drawn with Zipf weights.
    Zipf {
        num_items: usize,
        num_users: usize,
        length: usize,
        exponent: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub min_length: usize,
    pub num_val_users: usize,
    pub val_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Model initialisation seed.
    pub seed: u64,
    pub label: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub popularity: PopularitySource,
    /// `mode.metric` (e.g. `sampled.recall@10`) to a published value.
    pub reported: BTreeMap<String, f64>,
    pub sweep_base_steps: u64,
    pub sweep_multipliers: Vec<f64>,
}

/// Raw key/value pairs; every key must be consumed exactly once.
struct Keys {
    map: BTreeMap<String, (usize, String)>,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("line {line}: bad value '{v}' for {key}: {e}")),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn take_prefix(&mut self, prefix: &str) -> Vec<(String, usize, String)> {
        let keys: Vec<String> = self
            .map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let (line, v) = self.map.remove(&k).expect("present");
                (k[prefix.len()..].to_string(), line, v)
            })
            .collect()
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| anyhow!("bad list entry '{p}': {e}")))
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bail!("expected a boolean, got '{other}'"),
    }
}

/// Splits text into `key = value` pairs. `#` starts a comment.
fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
            bail!("line {}: duplicate key {key}", i + 1);
        }
    }
    Ok(map)
}

fn metric_name_ok(name: &str, cutoffs: &[usize]) -> bool {
    if name == "mrr" {
        return true;
    }
    match name.split_once('@') {
        Some(("recall" | "ndcg", k)) => k.parse().is_ok_and(|k: usize| cutoffs.contains(&k)),
        _ => false,
    }
}

impl ExperimentConfig {
    /// Reads a config file. Relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &[])
    }

    /// As [`load`](Self::load), with `key=value` overrides applied on top.
    pub fn load_with(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with(&text, base, overrides)
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        Self::parse_with(text, base_dir, &[])
    }

    pub fn parse_with(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut map = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override '{o}' is not key=value"))?;
            map.insert(k.trim().to_string(), (0, v.trim().to_string()));
        }
        let mut keys = Keys { map };
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };

        let seed = keys.or("seed", DEFAULT_SEED)?;
        let output_dir = resolve(keys.take("output_dir").unwrap_or_else(|| "out".into()));

        let source = match keys.take("data.source").as_deref().unwrap_or("file") {
            "file" => DataSource::File {
                path: resolve(
                    keys.take("data.path")
                        .ok_or_else(|| anyhow!("data.path is required for file data"))?,
                ),
                format: keys
                    .take("data.format")
                    .map(|f| f.parse::<InputFormat>())
                    .transpose()?
                    .unwrap_or(InputFormat::PairPerLine),
            },
            "cyclic" => DataSource::Cyclic {
                num_items: keys.or("data.num_items", 50)?,
                num_users: keys.or("data.num_users", 500)?,
                length: keys.or("data.length", 20)?,
            },
            "zipf" => DataSource::Zipf {
                num_items: keys.or("data.num_items", 200)?,
                num_users: keys.or("data.num_users", 1000)?,
                length: keys.or("data.length", 20)?,
                exponent: keys.or("data.exponent", 1.0)?,
                seed: keys.or("data.seed", seed)?,
            },
            other => bail!("unknown data.source '{other}'"),
        };
        let data = DataConfig {
            source,
            min_length: keys.or("data.min_length", DEFAULT_MIN_LENGTH)?,
            num_val_users: keys.or("data.num_val_users", DEFAULT_NUM_VAL_USERS)?,
            val_seed: keys.or("data.val_seed", DEFAULT_VAL_SEED)?,
        };

        let kind: ModelKind = keys.or("model.kind", ModelKind::Bert4Rec)?;
        let d = ModelConfig::defaults(kind);
        let model = ModelConfig {
            kind,
            max_seq_len: keys.or("model.max_seq_len", d.max_seq_len)?,
            hidden_size: keys.or("model.hidden_size", d.hidden_size)?,
            embedding_size: keys.or("model.embedding_size", d.embedding_size)?,
            num_blocks: keys.or("model.num_blocks", d.num_blocks)?,
            num_heads: keys.or("model.num_heads", d.num_heads)?,
            mask_prob: keys.or("model.mask_prob", d.mask_prob)?,
            dropout: keys.or("model.dropout", d.dropout)?,
            share_layers: keys
                .take("model.share_layers")
                .map(|v| parse_bool(&v))
                .transpose()?
                .unwrap_or(d.share_layers),
            latent_dim: keys.or("model.latent_dim", d.latent_dim)?,
        };
        model.validate()?;

        let t = TrainConfig::defaults_for(kind);
        let steps: Option<u64> = keys.parse("training.steps")?;
        let patience: Option<usize> = keys.parse("training.patience")?;
        let stopping = match keys.take("training.stopping").as_deref() {
            Some("steps") => Stopping::Steps(
                steps.ok_or_else(|| anyhow!("training.stopping = steps needs training.steps"))?,
            ),
            Some("early_stopping") => Stopping::EarlyStopping {
                patience: patience.unwrap_or(seqrec::training::DEFAULT_PATIENCE),
            },
            Some(other) => bail!("unknown training.stopping '{other}'"),
            None => match (steps, patience) {
                (Some(_), Some(_)) => bail!("set either training.steps or training.patience"),
                (Some(s), None) => Stopping::Steps(s),
                (None, Some(p)) => Stopping::EarlyStopping { patience: p },
                (None, None) => t.stopping,
            },
        };
        let max_epochs: Option<usize> = match keys.take("training.max_epochs").as_deref() {
            None | Some("none") => None,
            Some(v) => Some(v.parse().context("training.max_epochs")?),
        };
        let training = TrainConfig {
            objective: keys.or("training.objective", t.objective)?,
            batch_size: keys.or("training.batch_size", t.batch_size)?,
            stopping,
            // the model's masking rate unless training overrides it
            mask_prob: keys.or("training.mask_prob", model.mask_prob)?,
            adam: seqrec::tensor::AdamConfig {
                lr: keys.or("training.lr", t.adam.lr)?,
                beta1: keys.or("training.beta1", t.adam.beta1)?,
                beta2: keys.or("training.beta2", t.adam.beta2)?,
                epsilon: keys.or("training.epsilon", t.adam.epsilon)?,
            },
            seed: keys.or("training.seed", seed)?,
            sasrec_loss: keys.or("training.sasrec_loss", t.sasrec_loss)?,
            last_item_masking: keys
                .take("training.last_item_masking")
                .map(|v| parse_bool(&v))
                .transpose()?
                .unwrap_or(t.last_item_masking),
            max_epochs,
        };
        training.validate()?;

        let e = EvalConfig::default();
        let evaluation = EvalConfig {
            mode: keys.or("evaluation.mode", e.mode)?,
            cutoffs: match keys.take("evaluation.cutoffs") {
                Some(v) => parse_list(&v)?,
                None => e.cutoffs,
            },
            num_negatives: keys.or("evaluation.num_negatives", e.num_negatives)?,
            exclude_history: keys
                .take("evaluation.exclude_history")
                .map(|v| parse_bool(&v))
                .transpose()?
                .unwrap_or(e.exclude_history),
            seed: keys.or("evaluation.seed", seed)?,
        };
        evaluation.validate()?;
        let popularity = keys.or("evaluation.popularity", PopularitySource::Train)?;

        let mut reported = BTreeMap::new();
        for (name, line, v) in keys.take_prefix("reported.") {
            let (mode, metric) = name
                .split_once('.')
                .ok_or_else(|| anyhow!("line {line}: reported key needs mode.metric"))?;
            if EvalMode::from_str(mode).is_err() || mode == "both" {
                bail!("line {line}: reported mode must be sampled or unsampled");
            }
            if !metric_name_ok(metric, &evaluation.cutoffs) {
                bail!("line {line}: unknown reported metric '{metric}'");
            }
            let value: f64 = v.parse().map_err(|e| anyhow!("line {line}: {e}"))?;
            if !(value > 0.0) {
                bail!("line {line}: reported values must be positive");
            }
            reported.insert(name, value);
        }

        let sweep_base_steps = keys.or("sweep.base_steps", DEFAULT_SWEEP_BASE_STEPS)?;
        let sweep_multipliers = match keys.take("sweep.multipliers") {
            Some(v) => parse_list(&v)?,
            None => DEFAULT_SWEEP_MULTIPLIERS.to_vec(),
        };
        let label = keys.take("label").unwrap_or_else(|| kind.to_string());

        if let Some((k, (line, _))) = keys.map.iter().next() {
            if *line == 0 {
                bail!("unknown override key {k}");
            }
            bail!("line {line}: unknown key {k}");
        }
        if sweep_base_steps == 0 {
            bail!("sweep.base_steps must be positive");
        }
        Ok(ExperimentConfig {
            seed,
            label,
            output_dir,
            data,
            model,
            training,
            evaluation,
            popularity,
            reported,
            sweep_base_steps,
            sweep_multipliers,
        })
    }

    /// Every key with its effective value. Parsing this text yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("label", self.label.clone());
        kv("output_dir", self.output_dir.display().to_string());
        match &self.data.source {
            DataSource::File { path, format } => {
                kv("data.source", "file".into());
                kv("data.path", path.display().to_string());
                kv("data.format", format.to_string());
            }
            DataSource::Cyclic {
                num_items,
                num_users,
                length,
            } => {
                kv("data.source", "cyclic".into());
                kv("data.num_items", num_items.to_string());
                kv("data.num_users", num_users.to_string());
                kv("data.length", length.to_string());
            }
            DataSource::Zipf {
                num_items,
                num_users,
                length,
                exponent,
                seed,
            } => {
                kv("data.source", "zipf".into());
                kv("data.num_items", num_items.to_string());
                kv("data.num_users", num_users.to_string());
                kv("data.length", length.to_string());
                kv("data.exponent", exponent.to_string());
                kv("data.seed", seed.to_string());
            }
        }
        kv("data.min_length", self.data.min_length.to_string());
        kv("data.num_val_users", self.data.num_val_users.to_string());
        kv("data.val_seed", self.data.val_seed.to_string());

        let m = &self.model;
        kv("model.kind", m.kind.to_string());
        kv("model.max_seq_len", m.max_seq_len.to_string());
        kv("model.hidden_size", m.hidden_size.to_string());
        kv("model.embedding_size", m.embedding_size.to_string());
        kv("model.num_blocks", m.num_blocks.to_string());
        kv("model.num_heads", m.num_heads.to_string());
        kv("model.mask_prob", m.mask_prob.to_string());
        kv("model.dropout", m.dropout.to_string());
        kv("model.share_layers", m.share_layers.to_string());
        kv("model.latent_dim", m.latent_dim.to_string());

        let t = &self.training;
        kv("training.objective", t.objective.to_string());
        kv("training.batch_size", t.batch_size.to_string());
        match t.stopping {
            Stopping::Steps(n) => {
                kv("training.stopping", "steps".into());
                kv("training.steps", n.to_string());
            }
            Stopping::EarlyStopping { patience } => {
                kv("training.stopping", "early_stopping".into());
                kv("training.patience", patience.to_string());
            }
        }
        kv("training.mask_prob", t.mask_prob.to_string());
        kv("training.lr", t.adam.lr.to_string());
        kv("training.beta1", t.adam.beta1.to_string());
        kv("training.beta2", t.adam.beta2.to_string());
        kv("training.epsilon", t.adam.epsilon.to_string());
        kv("training.seed", t.seed.to_string());
        kv("training.sasrec_loss", t.sasrec_loss.to_string());
        kv("training.last_item_masking", t.last_item_masking.to_string());
        kv(
            "training.max_epochs",
            t.max_epochs.map_or("none".into(), |e| e.to_string()),
        );

        let e = &self.evaluation;
        kv("evaluation.mode", e.mode.as_str().into());
        kv(
            "evaluation.cutoffs",
            e.cutoffs
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("evaluation.num_negatives", e.num_negatives.to_string());
        kv("evaluation.exclude_history", e.exclude_history.to_string());
        kv("evaluation.seed", e.seed.to_string());
        kv(
            "evaluation.popularity",
            match self.popularity {
                PopularitySource::Train => "train".into(),
                PopularitySource::Full => "full".into(),
            },
        );
        for (k, v) in &self.reported {
            kv(&format!("reported.{k}"), v.to_string());
        }
        kv("sweep.base_steps", self.sweep_base_steps.to_string());
        kv(
            "sweep.multipliers",
            self.sweep_multipliers
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/tmp"))
    }

    #[test]
    fn defaults_follow_the_model_kind() {
        let c = parse("data.path = x.txt\nmodel.kind = sasrec\n").unwrap();
        assert_eq!(c.model, ModelConfig::defaults(ModelKind::SasRec));
        assert_eq!(c.training.objective, seqrec::training::Objective::ShiftedSequence);
        assert_eq!(c.training.batch_size, 128);
        assert_eq!(c.training.stopping, Stopping::EarlyStopping { patience: 200 });
        assert_eq!(c.evaluation.cutoffs, vec![1, 5, 10]);
        assert_eq!(c.evaluation.num_negatives, 100);
        assert!(c.evaluation.exclude_history);
        assert_eq!(
            c.data.source,
            DataSource::File {
                path: "/tmp/x.txt".into(),
                format: InputFormat::PairPerLine
            }
        );
        assert_eq!(c.sweep_multipliers, DEFAULT_SWEEP_MULTIPLIERS.to_vec());
        assert_eq!(c.sweep_base_steps, 400_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse("data.path = x\nmodel.hiden_size = 3\n").unwrap_err();
        assert!(err.to_string().contains("model.hiden_size"), "{err}");
        assert!(parse("data.path = x\ndata.path = y\n").is_err());
        assert!(parse("data.path\n").is_err());
    }

    #[test]
    fn invalid_values_fail_before_work() {
        assert!(parse("data.path = x\nmodel.num_heads = 3\n").is_err());
        assert!(parse("data.path = x\ntraining.steps = 0\n").is_err());
        assert!(parse("data.path = x\nevaluation.cutoffs = 0,5\n").is_err());
        assert!(parse("data.path = x\nreported.sampled.recall@20 = 0.5\n").is_err());
        assert!(parse("data.path = x\nreported.sampled.recall@10 = -1\n").is_err());
        assert!(parse("data.source = nowhere\n").is_err());
        assert!(parse("model.kind = sasrec\n").is_err());
    }

    #[test]
    fn effective_text_round_trips() {
        let c = parse(
            "data.source = zipf\ndata.exponent = 1.2\nmodel.kind = albert4rec\n\
             training.steps = 10\ntraining.max_epochs = 3\nreported.sampled.recall@10 = 0.697\n\
             sweep.multipliers = 0.5, 1\nevaluation.popularity = full\n",
        )
        .unwrap();
        let again = parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.training.stopping, Stopping::Steps(10));
        assert_eq!(again.sweep_multipliers, vec![0.5, 1.0]);
    }

    #[test]
    fn overrides_replace_file_values() {
        let c = ExperimentConfig::parse_with(
            "data.path = x\ntraining.steps = 10\n",
            Path::new("/"),
            &["training.steps = 20".into()],
        )
        .unwrap();
        assert_eq!(c.training.stopping, Stopping::Steps(20));
        let err = ExperimentConfig::parse_with("data.path = x\n", Path::new("/"), &["bogus=1".into()])
            .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn mask_rate_defaults_to_the_model_value() {
        let c = parse("data.path = x\nmodel.mask_prob = 0.3\n").unwrap();
        assert_eq!(c.training.mask_prob, 0.3);
        let c = parse("data.path = x\nmodel.mask_prob = 0.3\ntraining.mask_prob = 0.1\n").unwrap();
        assert_eq!(c.training.mask_prob, 0.1);
    }
}
