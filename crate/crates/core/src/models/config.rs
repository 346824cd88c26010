use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bert4Rec,
    SasRec,
    Albert4Rec,
    Deberta4Rec,
    MfBpr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Bert4Rec,
        ModelKind::SasRec,
        ModelKind::Albert4Rec,
        ModelKind::Deberta4Rec,
        ModelKind::MfBpr,
    ];

    pub fn attention(self) -> AttentionMode {
        match self {
            ModelKind::SasRec => AttentionMode::Causal,
            _ => AttentionMode::Bidirectional,
        }
    }

    pub fn is_sequence_model(self) -> bool {
        self != ModelKind::MfBpr
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Bert4Rec => "bert4rec",
            ModelKind::SasRec => "sasrec",
            ModelKind::Albert4Rec => "albert4rec",
            ModelKind::Deberta4Rec => "deberta4rec",
            ModelKind::MfBpr => "mf_bpr",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

/// Architecture and size hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub max_seq_len: usize,
    pub hidden_size: usize,
    /// Item embedding width; differs from `hidden_size` only with factorized embeddings.
    pub embedding_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mask_prob: f64,
    pub dropout: f64,
    pub share_layers: bool,
    /// Latent factors for `mf_bpr`.
    pub latent_dim: usize,
}

impl ModelConfig {
    /// Defaults per architecture: sequence length 50, hidden 64, two blocks,
    /// two heads, masking 0.2. SASRec uses width 50 with one head; the
    /// ALBERT and DeBERTa variants use sequence length 200, and ALBERT
    /// shares blocks and factorizes embeddings down to 16.
    pub fn defaults(kind: ModelKind) -> Self {
        let base = ModelConfig {
            kind,
            max_seq_len: 50,
            hidden_size: 64,
            embedding_size: 64,
            num_blocks: 2,
            num_heads: 2,
            mask_prob: 0.2,
            dropout: 0.1,
            share_layers: false,
            latent_dim: 128,
        };
        match kind {
            ModelKind::Bert4Rec | ModelKind::MfBpr => base,
            ModelKind::SasRec => ModelConfig {
                hidden_size: 50,
                embedding_size: 50,
                num_heads: 1,
                ..base
            },
            ModelKind::Albert4Rec => ModelConfig {
                max_seq_len: 200,
                embedding_size: 16,
                share_layers: true,
                ..base
            },
            ModelKind::Deberta4Rec => ModelConfig {
                max_seq_len: 200,
                ..base
            },
        }
    }

    /// The "longer seq" BERT4Rec variant (sequence length 100).
    pub fn bert4rec_longer_seq() -> Self {
        ModelConfig {
            max_seq_len: 100,
            ..Self::defaults(ModelKind::Bert4Rec)
        }
    }

    pub fn attention(&self) -> AttentionMode {
        self.kind.attention()
    }

    /// Blocks share one parameter set (always on for ALBERT).
    pub fn shares_layers(&self) -> bool {
        self.share_layers || self.kind == ModelKind::Albert4Rec
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.kind == ModelKind::MfBpr {
            if self.latent_dim == 0 {
                return fail("latent_dim must be positive".into());
            }
            return Ok(());
        }
        if self.num_heads == 0 || self.hidden_size == 0 || self.hidden_size % self.num_heads != 0 {
            return fail(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be positive".into());
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return fail(format!("mask_prob {} outside (0, 1)", self.mask_prob));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.embedding_size == 0 {
            return fail("embedding_size must be positive".into());
        }
        if self.kind != ModelKind::Albert4Rec && self.embedding_size != self.hidden_size {
            return fail(format!(
                "embedding_size {} must equal hidden_size {} unless embeddings are factorized (albert4rec)",
                self.embedding_size, self.hidden_size
            ));
        }
        Ok(())
    }
}
