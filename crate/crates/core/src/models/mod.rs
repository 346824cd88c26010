//! Sequence encoders, the matrix-factorization baseline, and next-item scoring.

mod config;
mod encoder;
mod init;
mod mf;

use std::path::Path;

pub use config::{AttentionMode, ModelConfig, ModelKind};
pub use encoder::{disentangled_attention_scores, relative_bucket, EncoderModel, PaddedBatch};
pub use init::{Initializer, INIT_STD};
pub use mf::MfModel;

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore};

/// Either model family behind one scoring interface.
#[derive(Debug, Clone)]
pub enum Model<T> {
    Encoder(EncoderModel<T>),
    Mf(MfModel<T>),
}

/// Builds a freshly initialized model. `num_users` only matters for `mf_bpr`.
pub fn build_model<T: Scalar>(
    config: ModelConfig,
    vocab_size: usize,
    num_users: usize,
    seed: u64,
) -> Result<Model<T>> {
    match config.kind {
        ModelKind::MfBpr => Ok(Model::Mf(MfModel::new(
            config, vocab_size, num_users, seed,
        )?)),
        _ => Ok(Model::Encoder(EncoderModel::new(config, vocab_size, seed)?)),
    }
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Encoder(m) => m.config(),
            Model::Mf(m) => m.config(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind
    }

    pub fn num_items(&self) -> usize {
        match self {
            Model::Encoder(m) => m.num_items(),
            Model::Mf(m) => m.num_items(),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Model::Encoder(m) => m.params(),
            Model::Mf(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Encoder(m) => m.params_mut(),
            Model::Mf(m) => m.params_mut(),
        }
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Score vectors indexed by item id (length `V + 2`, padding and mask at
    /// `-inf`) for a batch of users and their histories.
    pub fn score_batch(&self, users: &[usize], histories: &[&[ItemId]]) -> Result<Vec<Vec<T>>> {
        if users.len() != histories.len() {
            return Err(Error::Shape(format!(
                "{} users for {} histories",
                users.len(),
                histories.len()
            )));
        }
        match self {
            Model::Encoder(m) => m.score_histories(histories),
            Model::Mf(m) => {
                if histories.iter().any(|h| h.is_empty()) {
                    return Err(Error::Contract("cannot score an empty history".into()));
                }
                Ok(users.iter().map(|&u| m.score_user(Some(u))).collect())
            }
        }
    }

    /// Full next-item score vector for one user; entries for `exclude`,
    /// padding, and the mask token are `-inf`.
    pub fn predict_next_item(
        &self,
        user: usize,
        sequence: &[ItemId],
        exclude: &[ItemId],
    ) -> Result<Vec<T>> {
        let mut scores = self
            .score_batch(&[user], &[sequence])?
            .pop()
            .expect("one row");
        for &item in exclude {
            if let Some(s) = scores.get_mut(item as usize) {
                *s = T::neg_infinity();
            }
        }
        Ok(scores)
    }

    pub fn save_parameters(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.params().named_values())
    }

    /// Loads weights into an already-built model of the same architecture.
    pub fn load_parameters(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = read_checkpoint(path)?;
        self.params_mut().load_named(records)
    }
}
