//! Transformer encoder over item sequences with tied output scoring.
//!
//! Blocks use pre-norm residuals: `x + Attn(LN(x))`, then `x + FF(LN(x))`
//! with a 4x GELU feed-forward, and a final layer norm. Batches are
//! left-padded so the most recent item is always the rightmost position.

use super::config::{AttentionMode, ModelConfig, ModelKind};
use super::init::Initializer;
use crate::corpus::{ItemId, PAD_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-12;

/// Left-padded id matrix `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<ItemId>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedBatch {
    /// Left-pads each sequence to the longest one.
    pub fn left_padded(seqs: &[Vec<ItemId>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(std::iter::repeat_n(PAD_ID, len - s.len()));
            ids.extend_from_slice(s);
        }
        PaddedBatch {
            ids,
            batch: seqs.len(),
            len,
        }
    }

    pub fn row(&self, b: usize) -> &[ItemId] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// `visible[b, i, j]`: query `i` may attend to key `j`.
    pub fn attention_mask(&self, mode: AttentionMode) -> Vec<bool> {
        let l = self.len;
        let mut vis = vec![false; self.batch * l * l];
        for b in 0..self.batch {
            let row = self.row(b);
            for i in 0..l {
                for j in 0..l {
                    let causal_ok = mode == AttentionMode::Bidirectional || j <= i;
                    vis[b * l * l + i * l + j] = causal_ok && row[j] != PAD_ID;
                }
            }
        }
        vis
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                init.trunc_normal(&[fan_in, fan_out]),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.matmul(tape.param(store, self.weight))?
            .add_bias(tape.param(store, self.bias))
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.layer_norm(
            tape.param(store, self.gain),
            tape.param(store, self.bias),
            LN_EPS,
        )
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    /// Projections of the shared relative-position table (disentangled attention).
    pos_query: Option<Linear>,
    pos_key: Option<Linear>,
    ln_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let h = cfg.hidden_size;
        let disentangled = cfg.kind == ModelKind::Deberta4Rec;
        Block {
            ln_attn: Norm::new(store, &format!("{name}.ln_attn"), h),
            query: Linear::new(store, init, &format!("{name}.attn.query"), h, h),
            key: Linear::new(store, init, &format!("{name}.attn.key"), h, h),
            value: Linear::new(store, init, &format!("{name}.attn.value"), h, h),
            out: Linear::new(store, init, &format!("{name}.attn.out"), h, h),
            pos_query: disentangled
                .then(|| Linear::new(store, init, &format!("{name}.attn.pos_query"), h, h)),
            pos_key: disentangled
                .then(|| Linear::new(store, init, &format!("{name}.attn.pos_key"), h, h)),
            ln_ff: Norm::new(store, &format!("{name}.ln_ff"), h),
            ff_in: Linear::new(store, init, &format!("{name}.ff.in"), h, 4 * h),
            ff_out: Linear::new(store, init, &format!("{name}.ff.out"), 4 * h, h),
        }
    }
}

/// Relative distance bucket for query `i`, key `j`: `clamp(i - j) + span - 1`
/// with `span` the longest supported sequence.
pub fn relative_bucket(i: usize, j: usize, span: usize) -> usize {
    let max = span as isize - 1;
    let d = (i as isize - j as isize).clamp(-max, max);
    (d + max) as usize
}

fn bucket_table(len: usize, span: usize) -> Vec<usize> {
    (0..len)
        .flat_map(|i| (0..len).map(move |j| relative_bucket(i, j, span)))
        .collect()
}

/// Disentangled attention logits
/// `(Qc·Kcᵀ + Qc·Kr[δ(i,j)]ᵀ + Kc·Qr[δ(j,i)]ᵀ) / sqrt(3·d)`.
///
/// `content_q`, `content_k` are `[batch·heads, L, d]`; `rel_q`, `rel_k` are
/// the projected relative-position tables `[heads, 2·span − 1, d]`, shared by
/// the whole batch. Returns `[batch·heads, L, L]`.
pub fn disentangled_attention_scores<'t, T: Scalar>(
    content_q: Var<'t, T>,
    content_k: Var<'t, T>,
    rel_q: Var<'t, T>,
    rel_k: Var<'t, T>,
    heads: usize,
    span: usize,
) -> Result<Var<'t, T>> {
    let qs = content_q.shape();
    let rs = rel_k.shape();
    if qs.len() != 3 || rs.len() != 3 || rs[0] != heads || qs[0] % heads != 0 || rel_q.shape() != rs
    {
        return Err(Error::Shape(format!(
            "disentangled scores: content {qs:?}, relative {rs:?}, {heads} heads"
        )));
    }
    let (n, l, d) = (qs[0], qs[1], qs[2]);
    let b = n / heads;
    let r = rs[1];
    if l > span || r != 2 * span - 1 {
        return Err(Error::Shape(format!(
            "length {l} with span {span} needs {} relative rows, got {r}",
            2 * span - 1
        )));
    }
    let buckets = bucket_table(l, span);
    // [B*H, L, d] -> [H, B*L, d] so every head multiplies its own relative table once
    let per_head = |x: Var<'t, T>| -> Result<Var<'t, T>> {
        x.reshape(&[b, heads, l, d])?
            .permute(&[1, 0, 2, 3])?
            .reshape(&[heads, b * l, d])
    };
    let back = |x: Var<'t, T>| -> Result<Var<'t, T>> {
        x.reshape(&[heads, b, l, r])?
            .permute(&[1, 0, 2, 3])?
            .reshape(&[n, l, r])
    };
    let c2c = content_q.bmm_t(content_k)?;
    let c2p = back(per_head(content_q)?.bmm_t(rel_k)?)?.relative_gather(&buckets, false)?;
    let p2c = back(per_head(content_k)?.bmm_t(rel_q)?)?.relative_gather(&buckets, true)?;
    let scale = T::one() / T::from_usize(3 * d).unwrap().sqrt();
    Ok(c2c.add(c2p)?.add(p2c)?.scale(scale))
}

/// Embeddings, transformer blocks, and the tied item scorer.
#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    config: ModelConfig,
    num_items: usize,
    params: ParamStore<T>,
    item_embedding: ParamId,
    factor_projection: Option<ParamId>,
    position_embedding: Option<ParamId>,
    relative_embedding: Option<ParamId>,
    blocks: Vec<Block>,
    final_norm: Norm,
    output_bias: ParamId,
}

impl<T: Scalar> EncoderModel<T> {
    pub(crate) fn new(config: ModelConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::Config(
                "vocabulary must contain at least one item".into(),
            ));
        }
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let rows = num_items + 2;
        let h = config.hidden_size;
        let e = config.embedding_size;
        let item_embedding = params.add("item_embedding", init.trunc_normal(&[rows, e]));
        // the projection preserves scale (std 1/sqrt(e)) so the factorized
        // embedding is not shrunk twice by small initial weights
        let factor_projection = (config.kind == ModelKind::Albert4Rec).then(|| {
            params.add(
                "factor_projection",
                init.trunc_normal_std(&[e, h], 1.0 / (e as f64).sqrt()),
            )
        });
        let (position_embedding, relative_embedding) = if config.kind == ModelKind::Deberta4Rec {
            (
                None,
                Some(params.add(
                    "relative_embedding",
                    init.trunc_normal(&[2 * config.max_seq_len - 1, h]),
                )),
            )
        } else {
            // factorized models add positions in embedding space, ahead of the projection
            (
                Some(params.add(
                    "position_embedding",
                    init.trunc_normal(&[config.max_seq_len, e]),
                )),
                None,
            )
        };
        let blocks = if config.shares_layers() {
            let shared = Block::new(&mut params, &mut init, "shared_block", &config);
            vec![shared; config.num_blocks]
        } else {
            (0..config.num_blocks)
                .map(|i| Block::new(&mut params, &mut init, &format!("block{i}"), &config))
                .collect()
        };
        let final_norm = Norm::new(&mut params, "final_norm", h);
        let output_bias = params.add("output_bias", Tensor::zeros(&[rows]));
        Ok(EncoderModel {
            config,
            num_items,
            params,
            item_embedding,
            factor_projection,
            position_embedding,
            relative_embedding,
            blocks,
            final_norm,
            output_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn mask_id(&self) -> ItemId {
        self.num_items as ItemId + 1
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn item_embedding_id(&self) -> ParamId {
        self.item_embedding
    }

    /// Hidden states `[batch·len, hidden]` for a left-padded batch.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape<T>,
        batch: &PaddedBatch,
        mode: AttentionMode,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let (b, l, h) = (batch.batch, batch.len, cfg.hidden_size);
        if l > cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {l} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = batch
            .ids
            .iter()
            .find(|&&id| id as usize > self.num_items + 1)
        {
            return Err(Error::UnknownItem(bad));
        }
        let rows: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let store = &self.params;
        let mut x = tape.param(store, self.item_embedding).gather_rows(&rows)?;
        if let Some(pos) = self.position_embedding {
            // rightmost position always uses the last positional row
            let offset = cfg.max_seq_len - l;
            let positions: Vec<usize> = (0..b)
                .flat_map(|_| (0..l).map(move |j| offset + j))
                .collect();
            x = x.add(tape.param(store, pos).gather_rows(&positions)?)?;
        }
        if let Some(proj) = self.factor_projection {
            x = x.matmul(tape.param(store, proj))?;
        }
        x = x.dropout(cfg.dropout)?;

        let visible = batch.attention_mask(mode);
        let rel = self.relative_embedding.map(|r| tape.param(store, r));
        for block in &self.blocks {
            let normed = block.ln_attn.forward(tape, store, x)?;
            let attn = self.attention(tape, block, normed, &visible, b, l, rel)?;
            x = x.add(attn.dropout(cfg.dropout)?)?;
            let normed = block.ln_ff.forward(tape, store, x)?;
            let ff = block.ff_in.forward(tape, store, normed)?.gelu();
            let ff = block.ff_out.forward(tape, store, ff)?;
            x = x.add(ff.dropout(cfg.dropout)?)?;
        }
        let out = self.final_norm.forward(tape, store, x)?;
        debug_assert_eq!(out.shape(), vec![b * l, h]);
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'t>(
        &self,
        tape: &'t Tape<T>,
        block: &Block,
        x: Var<'t, T>,
        visible: &[bool],
        b: usize,
        l: usize,
        rel: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let store = &self.params;
        let heads = self.config.num_heads;
        let h = self.config.hidden_size;
        let d = h / heads;
        let split = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            v.reshape(&[b, l, heads, d])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * heads, l, d])
        };
        let q = split(block.query.forward(tape, store, x)?)?;
        let k = split(block.key.forward(tape, store, x)?)?;
        let v = split(block.value.forward(tape, store, x)?)?;
        let scores = match (rel, &block.pos_query, &block.pos_key) {
            (Some(rel), Some(pq), Some(pk)) => {
                let r = 2 * self.config.max_seq_len - 1;
                let per_head = |t: Var<'t, T>| -> Result<Var<'t, T>> {
                    t.reshape(&[r, heads, d])?.permute(&[1, 0, 2])
                };
                let rel_q = per_head(pq.forward(tape, store, rel)?)?;
                let rel_k = per_head(pk.forward(tape, store, rel)?)?;
                disentangled_attention_scores(q, k, rel_q, rel_k, heads, self.config.max_seq_len)?
            }
            _ => q
                .bmm_t(k)?
                .scale(T::one() / T::from_usize(d).unwrap().sqrt()),
        };
        let probs = scores
            .masked_softmax(visible, heads)?
            .dropout(self.config.dropout)?;
        let ctx = probs
            .bmm(v)?
            .reshape(&[b, heads, l, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * l, h])?;
        block.out.forward(tape, store, ctx)
    }

    /// Maps hidden states into item-embedding space (identity unless factorized).
    pub fn to_embedding_space<'t>(
        &self,
        tape: &'t Tape<T>,
        hidden: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self.factor_projection {
            Some(p) => hidden.matmul_t(tape.param(&self.params, p)),
            None => Ok(hidden),
        }
    }

    /// Logits `[n, V]` over real items (column `c` is item `c + 1`) for hidden rows `[n, hidden]`.
    pub fn item_logits<'t>(&self, tape: &'t Tape<T>, hidden: Var<'t, T>) -> Result<Var<'t, T>> {
        let real: Vec<usize> = (1..=self.num_items).collect();
        let table = tape
            .param(&self.params, self.item_embedding)
            .gather_rows(&real)?;
        let bias = tape
            .param(&self.params, self.output_bias)
            .reshape(&[self.num_items + 2, 1])?
            .gather_rows(&real)?;
        let bias = bias.reshape(&[self.num_items])?;
        self.to_embedding_space(tape, hidden)?
            .matmul_t(table)?
            .add_bias(bias)
    }

    /// Scores of specific items for each hidden row: `[n]` with `items.len() == n`.
    pub fn pair_scores<'t>(
        &self,
        tape: &'t Tape<T>,
        hidden: Var<'t, T>,
        items: &[ItemId],
    ) -> Result<Var<'t, T>> {
        let rows: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let emb = tape
            .param(&self.params, self.item_embedding)
            .gather_rows(&rows)?;
        let bias = tape
            .param(&self.params, self.output_bias)
            .reshape(&[self.num_items + 2, 1])?
            .gather_rows(&rows)?;
        let dots = self.to_embedding_space(tape, hidden)?.row_dot(emb)?;
        dots.add(bias.reshape(&[items.len()])?)
    }

    /// Full score rows `[positions.len() × (V + 2)]` for the selected
    /// flattened positions of `hidden`. Padding and mask columns are `-inf`.
    pub fn score_all_items<'t>(
        &self,
        tape: &'t Tape<T>,
        hidden: Var<'t, T>,
        positions: &[usize],
    ) -> Result<Tensor<T>> {
        let selected = hidden.gather_rows(positions)?;
        let logits = self.item_logits(tape, selected)?;
        let v = self.num_items;
        let values = logits.value();
        let mut out = Vec::with_capacity(positions.len() * (v + 2));
        for row in values.data().chunks_exact(v) {
            out.push(T::neg_infinity());
            out.extend_from_slice(row);
            out.push(T::neg_infinity());
        }
        Tensor::new(&[positions.len(), v + 2], out)
    }

    /// Builds the inference input for a history: bidirectional models get
    /// the most recent `max_seq_len - 1` items plus a trailing mask token,
    /// causal models the most recent `max_seq_len` items.
    pub fn inference_input(&self, history: &[ItemId]) -> Vec<ItemId> {
        let max = self.config.max_seq_len;
        match self.config.attention() {
            AttentionMode::Bidirectional => {
                let keep = history.len().min(max - 1);
                let mut seq = history[history.len() - keep..].to_vec();
                seq.push(self.mask_id());
                seq
            }
            AttentionMode::Causal => history[history.len() - history.len().min(max)..].to_vec(),
        }
    }

    /// Next-item score vectors (indexed by item id, length `V + 2`) for a batch of histories.
    pub fn score_histories(&self, histories: &[&[ItemId]]) -> Result<Vec<Vec<T>>> {
        if histories.iter().any(|h| h.is_empty()) {
            return Err(Error::Contract("cannot score an empty history".into()));
        }
        let inputs: Vec<Vec<ItemId>> = histories.iter().map(|h| self.inference_input(h)).collect();
        let batch = PaddedBatch::left_padded(&inputs);
        let tape = Tape::new();
        let hidden = self.encode(&tape, &batch, self.config.attention())?;
        let last: Vec<usize> = (0..batch.batch)
            .map(|b| b * batch.len + batch.len - 1)
            .collect();
        let scores = self.score_all_items(&tape, hidden, &last)?;
        Ok(scores
            .data()
            .chunks_exact(self.num_items + 2)
            .map(<[T]>::to_vec)
            .collect())
    }
}
