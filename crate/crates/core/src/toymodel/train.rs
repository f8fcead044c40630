//! Adam training on documents with random per-chunk compression counts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{segment_into_chunks, TokenId};
use crate::error::{io_err, Error, Result};

use super::{EncodedSequence, Target, ToyModel, TrainingSequence};

/// A query about a document and its expected continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub query: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// A document with the questions asked about it. All questions are laid out
/// as separate query segments of one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub document: Vec<TokenId>,
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    /// Peak Adam learning rate.
    pub step_size: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub chunk_len: usize,
    /// Compression-token counts are drawn uniformly from this inclusive range
    /// for every chunk of every sampled example.
    pub min_ct: usize,
    pub max_ct: usize,
    /// Total weight of a sequence's chunk language-modelling targets, split
    /// evenly across them; every answer target weighs 1.
    pub lm_weight: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of steps spent on linear warmup before cosine decay.
    pub warmup: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            step_size: 3e-3,
            seed: 0,
            batch_size: 8,
            chunk_len: 32,
            min_ct: 1,
            max_ct: 8,
            lm_weight: 0.5,
            grad_clip: 1.0,
            warmup: 0.05,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step_size {} must be > 0", self.step_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.chunk_len == 0 {
            return Err(Error::InvalidChunkLength(0));
        }
        if self.min_ct == 0 || self.min_ct > self.max_ct {
            return bad(format!("compression count range {}..={} is invalid", self.min_ct, self.max_ct));
        }
        if !(self.lm_weight.is_finite() && self.lm_weight >= 0.0) {
            return bad(format!("lm_weight {} must be >= 0", self.lm_weight));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("grad_clip {} must be >= 0", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad(format!("warmup {} must be in [0, 1)", self.warmup));
        }
        Ok(())
    }

    fn learning_rate(&self, step: usize) -> f64 {
        let warm = (self.warmup * self.steps as f64).ceil();
        let t = step as f64 + 1.0;
        if t <= warm {
            return self.step_size * t / warm;
        }
        let span = (self.steps as f64 - warm).max(1.0);
        let progress = ((t - warm) / span).min(1.0);
        let floor = 0.1;
        self.step_size * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Lays out `example` with the given per-chunk counts and attaches answer
/// targets (weight 1) and, if `lm_weight > 0`, chunk targets sharing
/// `lm_weight` between them.
pub fn example_sequence(
    example: &TrainingExample,
    chunk_len: usize,
    counts: &[usize],
    lm_weight: f64,
) -> Result<TrainingSequence> {
    let chunks = segment_into_chunks(&example.document, chunk_len)?;
    let prompts: Vec<Vec<TokenId>> = example
        .questions
        .iter()
        .map(|q| {
            let mut prompt = q.query.clone();
            if let Some((_, head)) = q.answer.split_last() {
                prompt.extend_from_slice(head);
            }
            prompt
        })
        .collect();
    let refs: Vec<&[TokenId]> = prompts.iter().map(Vec::as_slice).collect();
    let seq = EncodedSequence::with_queries(&chunks, counts, &refs)?;
    let mut targets = Vec::new();
    for (q, &start) in example.questions.iter().zip(&seq.query_starts) {
        let q0 = start + q.query.len();
        targets.extend(q.answer.iter().enumerate().map(|(k, &tok)| Target::new(q0 + k, tok)));
    }
    if lm_weight > 0.0 {
        let lm: Vec<(usize, TokenId)> = (0..seq.n_chunks()).flat_map(|i| seq.chunk_targets(i)).collect();
        let weight = lm_weight / lm.len() as f64;
        targets.extend(lm.into_iter().map(|(position, token)| Target { position, token, weight }));
    }
    Ok(TrainingSequence {
        input: seq.input,
        targets,
    })
}

/// Trains a copy of `model`; returns it with the per-step batch loss
/// (measured before each update). Deterministic given `opts.seed`.
pub fn train(model: &ToyModel, corpus: &[TrainingExample], opts: &TrainOptions) -> Result<(ToyModel, Vec<f64>)> {
    opts.validate()?;
    let mut model = model.clone();
    if opts.steps == 0 {
        return Ok((model, Vec::new()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_chunks: Vec<usize> = corpus
        .iter()
        .map(|e| e.document.len().div_ceil(opts.chunk_len))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = model.n_params();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let e = rng.gen_range(0..corpus.len());
            let counts: Vec<usize> = (0..n_chunks[e])
                .map(|_| rng.gen_range(opts.min_ct..=opts.max_ct))
                .collect();
            batch.push(example_sequence(&corpus[e], opts.chunk_len, &counts, opts.lm_weight)?);
        }
        let (loss, mut grad) = model.loss_and_gradients(&batch)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        if opts.grad_clip > 0.0 && norm > opts.grad_clip {
            let s = opts.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = opts.learning_rate(step);
        let t = (step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), mi), vi) in model.params.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok((model, losses))
}

/// Reads a corpus with one JSON [`TrainingExample`] per line; blank lines
/// are skipped.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut corpus = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        corpus.push(example);
    }
    Ok(corpus)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[TrainingExample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for example in corpus {
        serde_json::to_writer(&mut w, example)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
