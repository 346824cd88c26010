//! Training objectives and the optimization loop.

mod log;
mod masking;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use log::{EarlyStopper, EpochRecord, StopReason, TrainLog};
pub use masking::{bpr_loss, mask_last, mask_sequence, shift_targets, MaskedRow};

use crate::corpus::{ItemId, SplitDataset};
use crate::error::{Error, Result};
use crate::models::{AttentionMode, EncoderModel, MfModel, Model, ModelKind, PaddedBatch};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, stream_rng};
use crate::tensor::gradcheck::{check_param_gradients, GradCheck, GradReport};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_PATIENCE: usize = 200;
pub const DEFAULT_TRAIN_SEED: u64 = 42;
const VALIDATION_CHUNK: usize = 256;

const EPOCH_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;
const VALIDATION_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaskedItem,
    ShiftedSequence,
    Bpr,
}

impl Objective {
    /// The objective each architecture is normally trained with.
    pub fn for_model(kind: ModelKind) -> Self {
        match kind {
            ModelKind::SasRec => Objective::ShiftedSequence,
            ModelKind::MfBpr => Objective::Bpr,
            _ => Objective::MaskedItem,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::MaskedItem => "masked_item",
            Objective::ShiftedSequence => "shifted_sequence",
            Objective::Bpr => "bpr",
        }
    }

    fn check_compatible(self, kind: ModelKind) -> Result<()> {
        let ok = match self {
            Objective::MaskedItem => {
                kind.is_sequence_model() && kind.attention() == AttentionMode::Bidirectional
            }
            Objective::ShiftedSequence => {
                kind.is_sequence_model() && kind.attention() == AttentionMode::Causal
            }
            Objective::Bpr => kind == ModelKind::MfBpr,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "objective {} cannot train a {kind} model",
                self.as_str()
            )))
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Objective::MaskedItem,
            Objective::ShiftedSequence,
            Objective::Bpr,
        ]
        .into_iter()
        .find(|o| o.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown objective '{s}'")))
    }
}

/// Loss used with the shifted-sequence objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SasRecLoss {
    /// Binary cross-entropy against one uniformly drawn unseen item per position.
    #[default]
    OneUniformNegative,
    FullSoftmax,
}

impl SasRecLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            SasRecLoss::OneUniformNegative => "one_uniform_negative",
            SasRecLoss::FullSoftmax => "full_softmax",
        }
    }
}

impl fmt::Display for SasRecLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SasRecLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SasRecLoss::OneUniformNegative, SasRecLoss::FullSoftmax]
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sasrec loss '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stopping {
    /// Exactly this many optimizer steps.
    Steps(u64),
    /// Stop after `patience` epochs without validation improvement and
    /// restore the best epoch's parameters.
    EarlyStopping { patience: usize },
}

impl Default for Stopping {
    fn default() -> Self {
        Stopping::EarlyStopping {
            patience: DEFAULT_PATIENCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub stopping: Stopping,
    pub mask_prob: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub sasrec_loss: SasRecLoss,
    /// Mask only the final item of every training sequence.
    pub last_item_masking: bool,
    /// Hard cap on epochs in either stopping mode.
    pub max_epochs: Option<usize>,
}

impl TrainConfig {
    pub fn defaults_for(kind: ModelKind) -> Self {
        TrainConfig {
            objective: Objective::for_model(kind),
            batch_size: DEFAULT_BATCH_SIZE,
            stopping: Stopping::default(),
            mask_prob: 0.2,
            adam: AdamConfig::default(),
            seed: DEFAULT_TRAIN_SEED,
            sasrec_loss: SasRecLoss::default(),
            last_item_masking: false,
            max_epochs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        match self.stopping {
            Stopping::Steps(0) => {
                return Err(Error::Config("step budget must be at least 1".into()))
            }
            Stopping::EarlyStopping { patience: 0 } => {
                return Err(Error::Config("patience must be at least 1".into()))
            }
            _ => {}
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_prob {} outside (0, 1)",
                self.mask_prob
            )));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be non-negative",
                self.adam.lr
            )));
        }
        if self.max_epochs == Some(0) {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

fn most_recent(seq: &[ItemId], n: usize) -> &[ItemId] {
    &seq[seq.len() - seq.len().min(n)..]
}

/// A uniformly drawn item in `1..=num_items` outside the sorted `excluded` list.
fn sample_excluding<R: Rng + ?Sized>(
    rng: &mut R,
    num_items: usize,
    excluded: &[ItemId],
) -> Result<ItemId> {
    let available = num_items - excluded.len().min(num_items);
    if available == 0 {
        return Err(Error::Sampling {
            wanted: 1,
            available: 0,
        });
    }
    for _ in 0..64 {
        let item = rng.random_range(1..=num_items as ItemId);
        if excluded.binary_search(&item).is_err() {
            return Ok(item);
        }
    }
    let k = rng.random_range(0..available);
    Ok((1..=num_items as ItemId)
        .filter(|i| excluded.binary_search(i).is_err())
        .nth(k)
        .expect("k < available"))
}

/// One negative for `positive`: outside the user's items when possible,
/// otherwise anything but the positive.
fn sample_negative<R: Rng + ?Sized>(
    rng: &mut R,
    num_items: usize,
    seen: &[ItemId],
    positive: ItemId,
) -> Result<ItemId> {
    sample_excluding(rng, num_items, seen)
        .or_else(|_| sample_excluding(rng, num_items, &[positive]))
}

fn seen_items(seq: &[ItemId]) -> Vec<ItemId> {
    let mut items = seq.to_vec();
    items.sort_unstable();
    items.dedup();
    items
}

struct StepContext<'a> {
    split: &'a SplitDataset,
    cfg: &'a TrainConfig,
    seen: &'a [Vec<ItemId>],
}

/// Builds the training loss for one batch of users, or `None` when the
/// batch holds no trainable position.
fn batch_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    model: &Model<T>,
    ctx: &StepContext<'_>,
    users: &[usize],
    step: u64,
) -> Result<Option<Var<'t, T>>> {
    let mut rng = stream_rng(derive_seed(ctx.cfg.seed, BATCH_STREAM), step);
    match (model, ctx.cfg.objective) {
        (Model::Encoder(m), Objective::MaskedItem) => {
            masked_item_loss(tape, m, ctx, users, &mut rng)
        }
        (Model::Encoder(m), Objective::ShiftedSequence) => {
            shifted_loss(tape, m, ctx, users, &mut rng)
        }
        (Model::Mf(m), Objective::Bpr) => pairwise_loss(tape, m, ctx, users, &mut rng),
        (m, o) => Err(Error::Config(format!(
            "objective {o} cannot train a {} model",
            m.kind()
        ))),
    }
}

fn masked_item_loss<'t, T: Scalar, R: Rng>(
    tape: &'t Tape<T>,
    m: &EncoderModel<T>,
    ctx: &StepContext<'_>,
    users: &[usize],
    rng: &mut R,
) -> Result<Option<Var<'t, T>>> {
    let max = m.config().max_seq_len;
    let rows: Vec<MaskedRow> = users
        .iter()
        .map(|&u| {
            let seq = most_recent(&ctx.split.train[u], max);
            if ctx.cfg.last_item_masking {
                mask_last(seq, m.mask_id())
            } else {
                mask_sequence(seq, m.mask_id(), ctx.cfg.mask_prob, rng)
            }
        })
        .collect();
    let batch = PaddedBatch::left_padded(&rows.iter().map(|r| r.input.clone()).collect::<Vec<_>>());
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (b, row) in rows.iter().enumerate() {
        let offset = b * batch.len + batch.len - row.input.len();
        for (j, &active) in row.active.iter().enumerate() {
            if active {
                positions.push(offset + j);
                targets.push(row.labels[j] as usize - 1);
            }
        }
    }
    if positions.is_empty() {
        return Ok(None);
    }
    let hidden = m.encode(tape, &batch, AttentionMode::Bidirectional)?;
    let logits = m.item_logits(tape, hidden.gather_rows(&positions)?)?;
    let active = vec![true; positions.len()];
    tape.masked_cross_entropy(logits, &targets, &active)
        .map(Some)
}

fn shifted_loss<'t, T: Scalar, R: Rng>(
    tape: &'t Tape<T>,
    m: &EncoderModel<T>,
    ctx: &StepContext<'_>,
    users: &[usize],
    rng: &mut R,
) -> Result<Option<Var<'t, T>>> {
    let max = m.config().max_seq_len;
    let mut inputs = Vec::new();
    let mut owners = Vec::new();
    let mut all_targets = Vec::new();
    for &u in users {
        if let Ok((inp, tgt)) = shift_targets(most_recent(&ctx.split.train[u], max + 1)) {
            inputs.push(inp);
            all_targets.push(tgt);
            owners.push(u);
        }
    }
    if inputs.is_empty() {
        return Ok(None);
    }
    let batch = PaddedBatch::left_padded(&inputs);
    let mut positions = Vec::new();
    let mut targets: Vec<ItemId> = Vec::new();
    let mut negatives = Vec::new();
    for (b, tgt) in all_targets.iter().enumerate() {
        let offset = b * batch.len + batch.len - tgt.len();
        for (j, &t) in tgt.iter().enumerate() {
            positions.push(offset + j);
            targets.push(t);
            if ctx.cfg.sasrec_loss == SasRecLoss::OneUniformNegative {
                negatives.push(sample_negative(
                    rng,
                    ctx.split.num_items,
                    &ctx.seen[owners[b]],
                    t,
                )?);
            }
        }
    }
    let hidden = m
        .encode(tape, &batch, AttentionMode::Causal)?
        .gather_rows(&positions)?;
    match ctx.cfg.sasrec_loss {
        SasRecLoss::FullSoftmax => {
            let logits = m.item_logits(tape, hidden)?;
            let classes: Vec<usize> = targets.iter().map(|&t| t as usize - 1).collect();
            tape.masked_cross_entropy(logits, &classes, &vec![true; classes.len()])
                .map(Some)
        }
        SasRecLoss::OneUniformNegative => {
            let w = vec![T::one() / T::from_usize(targets.len()).unwrap(); targets.len()];
            let pos = m.pair_scores(tape, hidden, &targets)?;
            let neg = m.pair_scores(tape, hidden, &negatives)?;
            // -ln σ(pos) = softplus(-pos), -ln(1 - σ(neg)) = softplus(neg)
            let pos_term = tape.softplus_sum(pos.scale(-T::one()), &w)?;
            let neg_term = tape.softplus_sum(neg, &w)?;
            pos_term.add(neg_term).map(Some)
        }
    }
}

fn pairwise_loss<'t, T: Scalar, R: Rng>(
    tape: &'t Tape<T>,
    m: &MfModel<T>,
    ctx: &StepContext<'_>,
    users: &[usize],
    rng: &mut R,
) -> Result<Option<Var<'t, T>>> {
    let mut us = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for &u in users {
        for &item in &ctx.split.train[u] {
            us.push(u);
            pos.push(item);
            neg.push(sample_negative(
                rng,
                ctx.split.num_items,
                &ctx.seen[u],
                item,
            )?);
        }
    }
    if us.is_empty() {
        return Ok(None);
    }
    let diff = m
        .pair_scores(tape, &us, &neg)?
        .sub(m.pair_scores(tape, &us, &pos)?)?;
    let w = vec![T::one() / T::from_usize(us.len()).unwrap(); us.len()];
    tape.softplus_sum(diff, &w).map(Some)
}

/// Finite-difference check of the training loss of one batch, with
/// dropout disabled. Masks and negatives are drawn as at `step`.
pub fn check_training_gradients(
    model: &Model<f64>,
    split: &SplitDataset,
    cfg: &TrainConfig,
    users: &[usize],
    step: u64,
    check: &GradCheck,
) -> Result<GradReport> {
    cfg.validate()?;
    cfg.objective.check_compatible(model.kind())?;
    let seen: Vec<Vec<ItemId>> = split.train.iter().map(|s| seen_items(s)).collect();
    let ctx = StepContext {
        split,
        cfg,
        seen: &seen,
    };
    check_param_gradients(
        model.params(),
        |tape, store| {
            let mut m = model.clone();
            *m.params_mut() = store.clone();
            batch_loss(tape, &m, &ctx, users, step)?.ok_or(Error::DegenerateBatch)
        },
        check,
    )
}

/// Trains `model` in place and returns the per-epoch log.
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    split: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_model_with(model, split, cfg, |_| {})
}

/// As [`train_model`], calling `on_epoch` after every epoch.
pub fn train_model_with<T: Scalar>(
    model: &mut Model<T>,
    split: &SplitDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    cfg.objective.check_compatible(model.kind())?;
    if split.num_items != model.num_items() {
        return Err(Error::Config(format!(
            "model has {} items but the dataset has {}",
            model.num_items(),
            split.num_items
        )));
    }
    if split.num_users() == 0 {
        return Err(Error::EmptyDataset);
    }
    let has_validation = !split.validation.is_empty();
    if matches!(cfg.stopping, Stopping::EarlyStopping { .. }) && !has_validation {
        return Err(Error::Config(
            "early stopping needs validation users".into(),
        ));
    }
    let seen: Vec<Vec<ItemId>> = split.train.iter().map(|s| seen_items(s)).collect();
    let ctx = StepContext {
        split,
        cfg,
        seen: &seen,
    };
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut stopper = EarlyStopper::new(match cfg.stopping {
        Stopping::EarlyStopping { patience } => patience,
        Stopping::Steps(_) => usize::MAX,
    });
    let mut best_params: Option<Vec<Tensor<T>>> = None;
    let mut epochs = Vec::new();
    let mut step: u64 = 0;
    let mut epoch = 0;
    let mut last_seconds = 0.0;
    let start = Instant::now();

    let stop_reason = loop {
        epoch += 1;
        let mut order: Vec<usize> = (0..split.num_users()).collect();
        order.shuffle(&mut stream_rng(
            derive_seed(cfg.seed, EPOCH_STREAM),
            epoch as u64,
        ));
        for users in order.chunks(cfg.batch_size) {
            if matches!(cfg.stopping, Stopping::Steps(n) if step >= n) {
                break;
            }
            let tape = Tape::training(derive_seed(derive_seed(cfg.seed, DROPOUT_STREAM), step));
            if let Some(loss) = batch_loss(&tape, model, &ctx, users, step)? {
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        loss: value.as_f64(),
                    });
                }
                let grads = tape.backward(loss)?;
                let store = model.params_mut();
                store.zero_grads();
                grads.accumulate_into(store);
                adam.step(store);
            }
            step += 1;
        }

        let val_loss = if has_validation {
            Some(validation_loss(model, split, cfg.objective, cfg.seed)?)
        } else {
            None
        };
        let mut seconds = start.elapsed().as_secs_f64();
        if seconds <= last_seconds {
            seconds = f64::from_bits(last_seconds.to_bits() + 1);
        }
        last_seconds = seconds;
        let record = EpochRecord {
            epoch,
            val_loss,
            cum_seconds: seconds,
            steps: step,
        };
        on_epoch(&record);
        epochs.push(record);

        if let Some(v) = val_loss {
            if stopper.observe(epoch, v) && matches!(cfg.stopping, Stopping::EarlyStopping { .. }) {
                best_params = Some(model.params().values());
            }
        }
        match cfg.stopping {
            Stopping::Steps(n) if step >= n => break StopReason::StepBudget,
            Stopping::EarlyStopping { .. } if stopper.should_stop(epoch) => {
                break StopReason::EarlyStopping
            }
            _ => {}
        }
        if cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break StopReason::MaxEpochs;
        }
    };
    if let Some(values) = best_params {
        model.params_mut().set_values(values)?;
    }
    Ok(TrainLog {
        epochs,
        total_steps: step,
        total_seconds: last_seconds,
        best_epoch: stopper.best_epoch(),
        stop_reason,
    })
}

/// Mean validation loss over the held-out validation items.
///
/// Sequence models score the validation item from the training history
/// (masked models through a trailing mask token) with cross-entropy over
/// all items; the pairwise objective uses one seeded negative per user.
pub fn validation_loss<T: Scalar>(
    model: &Model<T>,
    split: &SplitDataset,
    objective: Objective,
    seed: u64,
) -> Result<f64> {
    objective.check_compatible(model.kind())?;
    if split.validation.is_empty() {
        return Err(Error::Contract(
            "validation loss needs at least one validation user".into(),
        ));
    }
    let pairs: Vec<(usize, ItemId)> = split.validation.iter().map(|(&u, &i)| (u, i)).collect();
    let total: f64 = match model {
        Model::Encoder(m) => {
            let mut total = 0.0;
            for chunk in pairs.chunks(VALIDATION_CHUNK) {
                let inputs: Vec<Vec<ItemId>> = chunk
                    .iter()
                    .map(|&(u, _)| m.inference_input(&split.train[u]))
                    .collect();
                let batch = PaddedBatch::left_padded(&inputs);
                let tape = Tape::new();
                let hidden = m.encode(&tape, &batch, m.config().attention())?;
                let last: Vec<usize> = (0..batch.batch).map(|b| (b + 1) * batch.len - 1).collect();
                let logits = m.item_logits(&tape, hidden.gather_rows(&last)?)?;
                let targets: Vec<usize> = chunk.iter().map(|&(_, i)| i as usize - 1).collect();
                let loss =
                    tape.weighted_cross_entropy(logits, &targets, &vec![T::one(); chunk.len()])?;
                total += loss.item().as_f64();
            }
            total
        }
        Model::Mf(m) => {
            let mut total = 0.0;
            for &(u, item) in &pairs {
                let mut rng = stream_rng(derive_seed(seed, VALIDATION_STREAM), u as u64);
                let mut seen = split.train[u].clone();
                seen.push(item);
                let neg = sample_negative(&mut rng, split.num_items, &seen_items(&seen), item)?;
                let s = m.mf_score(Some(u), &[item, neg])?;
                total += bpr_loss(s[0].as_f64(), s[1].as_f64());
            }
            total
        }
    };
    Ok(total / pairs.len() as f64)
}
