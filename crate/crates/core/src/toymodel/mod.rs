//! A desk-scale decoder-only transformer with interleaved compression tokens.
//!
//! Parameters live in one flat `f64` vector (see [`ToyModel::tensor_specs`]
//! for the named tensors inside it). The model reads a document laid out as
//! `[START x_0 .. x_L] [ct .. ct] [START ...] [ct ..] ... [QUERY q ..]` under
//! the compression mask, and exposes the two signals the allocator needs:
//! per-token log-probabilities of each chunk and the attention the final
//! query token pays to each chunk's compression tokens.

mod checkpoint;
mod compress;
mod engine;
mod gradcheck;
mod layout;
mod params;
mod train;

use ndarray::Array2;

use crate::domain::{AllocationPlan, Chunk, TokenId};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck_fixture, gradient_check, rel_error, GradCheckEntry, GradCheckReport};
pub use layout::{
    build_compression_mask, AttentionMask, EncodedSequence, ModelInput, PositionInfo, Segment,
    SegmentKind, SequenceLayout,
};
pub use params::{TensorSpec, ToyModelConfig};
pub use train::{example_sequence, read_corpus, train, write_corpus, Question, TrainOptions, TrainingExample};

use engine::{dense_attention, log_softmax_rows, log_softmax_with_probs, mean_head_row, token_row};
use params::{init_params, ParamIndex};

/// Placeholder id at compression-token positions.
pub const CT_TOKEN: TokenId = 256;
/// Marker opening every chunk's raw segment.
pub const CHUNK_START: TokenId = 257;
/// Marker opening the query segment.
pub const QUERY_START: TokenId = 258;
/// Bytes plus the three special tokens.
pub const MIN_VOCAB: usize = 259;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    params: Vec<f64>,
    index: ParamIndex,
}

impl PartialEq for ParamIndex {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs
    }
}

/// Logits for every position plus dense attention maps.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[total_len x vocab_size]`.
    pub logits: Array2<f64>,
    /// `attention[layer][head]` is `[total_len x total_len]`; masked entries
    /// are exactly zero.
    pub attention: Vec<Vec<Array2<f64>>>,
}

/// Final-query attention restricted to compression-token keys.
#[derive(Debug, Clone, PartialEq)]
pub struct CtAttention {
    /// Sums to one.
    pub weights: Vec<f64>,
    pub positions: Vec<usize>,
    /// Owning chunk of each weight.
    pub ownership: Vec<usize>,
}

/// A supervised position: the logits at `position` should predict `token`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub position: usize,
    pub token: TokenId,
    pub weight: f64,
}

impl Target {
    pub fn new(position: usize, token: TokenId) -> Self {
        Self {
            position,
            token,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub input: ModelInput,
    pub targets: Vec<Target>,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        let params = init_params(&config, &index);
        Ok(Self {
            config,
            params,
            index,
        })
    }

    pub(crate) fn from_parts(config: ToyModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        if params.len() != index.len {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                index.len,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        &self.index.specs
    }

    /// Zeroes the output head so every position predicts the uniform
    /// distribution.
    pub fn zero_head(&mut self) {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        self.params[self.index.head_w..self.index.head_w + d * v].fill(0.0);
        self.params[self.index.head_b..self.index.head_b + v].fill(0.0);
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ForwardOutput> {
        let act = self.activations(input)?;
        let positions: Vec<usize> = (0..input.tokens.len()).collect();
        let logits = self.logits_at(&act, &positions);
        let attention = act
            .layers
            .iter()
            .map(|la| {
                (0..self.config.n_heads)
                    .map(|h| dense_attention(la, &act.keys, h))
                    .collect()
            })
            .collect();
        Ok(ForwardOutput { logits, attention })
    }

    /// Log-probabilities of each listed `(position, token)` prediction.
    pub fn target_logprobs(&self, input: &ModelInput, targets: &[(usize, TokenId)]) -> Result<Vec<f64>> {
        let act = self.activations(input)?;
        Ok(self.logprobs_from(&act, targets))
    }

    fn logprobs_from(&self, act: &engine::Activations, targets: &[(usize, TokenId)]) -> Vec<f64> {
        let positions: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
        let logp = log_softmax_rows(&self.logits_at(act, &positions));
        targets
            .iter()
            .enumerate()
            .map(|(r, &(_, tok))| token_row(&logp, r, tok).min(0.0))
            .collect()
    }

    /// Per-token log-probabilities of every chunk under `counts`
    /// compression tokens per chunk.
    pub fn all_chunk_logprobs(&self, seq: &EncodedSequence) -> Result<Vec<Vec<f64>>> {
        let act = self.activations(&seq.input)?;
        Ok(self.chunk_logprobs_from(&act, seq))
    }

    fn chunk_logprobs_from(&self, act: &engine::Activations, seq: &EncodedSequence) -> Vec<Vec<f64>> {
        (0..seq.n_chunks())
            .map(|i| self.logprobs_from(act, &seq.chunk_targets(i)))
            .collect()
    }

    /// `log p(x_l | earlier compression tokens, chunk prefix)` for every token
    /// of chunk `chunk_index`, laid out by `plan`.
    pub fn chunk_logprobs(&self, chunks: &[Chunk], plan: &AllocationPlan, chunk_index: usize) -> Result<Vec<f64>> {
        if chunk_index >= chunks.len() {
            return Err(Error::ChunkIndexOutOfRange {
                index: chunk_index,
                n_chunks: chunks.len(),
            });
        }
        let seq = EncodedSequence::new(chunks, &plan.counts, None)?;
        self.target_logprobs(&seq.input, &seq.chunk_targets(chunk_index))
    }

    /// Last-layer, head-averaged attention of the final position, restricted
    /// to compression-token keys and renormalized.
    pub fn extract_last_token_attention(&self, seq: &EncodedSequence) -> Result<CtAttention> {
        let act = self.activations(&seq.input)?;
        self.ct_attention_from(&act, seq)
    }

    fn ct_attention_from(&self, act: &engine::Activations, seq: &EncodedSequence) -> Result<CtAttention> {
        if seq.ct_positions.is_empty() {
            return Err(Error::NoCompressionTokens);
        }
        let last = seq.last_position();
        let row = mean_head_row(act.layers.last().expect("n_layers >= 1"), &act.keys, last);
        let mut weights = vec![0.0; seq.ct_positions.len()];
        for (key, w) in row {
            if let Ok(slot) = seq.ct_positions.binary_search(&key) {
                weights[slot] = w;
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::NoCompressionTokens);
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(CtAttention {
            weights,
            positions: seq.ct_positions.clone(),
            ownership: seq.ct_owner.clone(),
        })
    }

    /// Chunk log-probabilities and final-token compression attention from a
    /// single pass.
    pub fn analyze(&self, seq: &EncodedSequence) -> Result<(Vec<Vec<f64>>, CtAttention)> {
        let act = self.activations(&seq.input)?;
        let logprobs = self.chunk_logprobs_from(&act, seq);
        let attn = self.ct_attention_from(&act, seq)?;
        Ok((logprobs, attn))
    }

    /// Greedy decoding of `n_tokens` after the query.
    pub fn greedy_answer(&self, chunks: &[Chunk], counts: &[usize], query: &[TokenId], n_tokens: usize) -> Result<Vec<TokenId>> {
        let mut prompt = query.to_vec();
        let mut answer = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let seq = EncodedSequence::new(chunks, counts, Some(&prompt))?;
            let act = self.activations(&seq.input)?;
            let logits = self.logits_at(&act, &[seq.last_position()]);
            let row = logits.row(0);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            answer.push(best as TokenId);
            prompt.push(best as TokenId);
        }
        Ok(answer)
    }

    fn check_targets(&self, seq: &TrainingSequence) -> Result<()> {
        let info = seq.input.layout.positions();
        for t in &seq.targets {
            let pos = info.get(t.position).ok_or_else(|| {
                Error::InvalidLayout(format!("target position {} is out of range", t.position))
            })?;
            if pos.kind != SegmentKind::Raw {
                return Err(Error::InvalidLayout(format!(
                    "target position {} is a compression token",
                    t.position
                )));
            }
            if t.token as usize >= self.config.vocab_size {
                return Err(Error::InvalidLayout(format!("target token {} outside vocabulary", t.token)));
            }
            if !(t.weight.is_finite() && t.weight > 0.0) {
                return Err(Error::InvalidLayout(format!("target weight {} must be > 0", t.weight)));
            }
        }
        Ok(())
    }

    /// Weighted mean cross-entropy over all targets of the batch (the plain
    /// mean when every weight is one).
    pub fn loss(&self, batch: &[TrainingSequence]) -> Result<f64> {
        self.loss_impl(batch, false).map(|(l, _)| l)
    }

    pub fn loss_and_gradients(&self, batch: &[TrainingSequence]) -> Result<(f64, Vec<f64>)> {
        self.loss_impl(batch, true)
    }

    fn loss_impl(&self, batch: &[TrainingSequence], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let total_weight: f64 = batch.iter().flat_map(|s| &s.targets).map(|t| t.weight).sum();
        if batch.iter().all(|s| s.targets.is_empty()) {
            return Err(Error::NoTargets);
        }
        for seq in batch {
            self.check_targets(seq)?;
        }
        let mut grad = if with_grad { vec![0.0; self.params.len()] } else { Vec::new() };
        let mut loss = 0.0;
        for seq in batch.iter().filter(|s| !s.targets.is_empty()) {
            let act = self.activations(&seq.input)?;
            let positions: Vec<usize> = seq.targets.iter().map(|t| t.position).collect();
            let (logp, mut dlogits) = log_softmax_with_probs(&self.logits_at(&act, &positions));
            for (r, t) in seq.targets.iter().enumerate() {
                loss -= t.weight * token_row(&logp, r, t.token);
            }
            if with_grad {
                // d(loss)/d(logits) = w * (softmax - onehot) / total_weight
                for (r, t) in seq.targets.iter().enumerate() {
                    dlogits[[r, t.token as usize]] -= 1.0;
                    let scale = t.weight / total_weight;
                    dlogits.row_mut(r).mapv_inplace(|g| g * scale);
                }
                self.backward(&seq.input, &act, &positions, &dlogits, &mut grad);
            }
        }
        Ok((loss / total_weight, grad))
    }
}

#[cfg(test)]
mod tests;
