//! Synthetic needle-retrieval task and the allocation sweeps run on it.
//!
//! Every chunk of a document opens with key–value records (`K v v v v v`)
//! followed by lowercase filler words. Exactly one chunk holds the queried
//! key. The query names a key and a value position `j`; the expected answer
//! is the `j`-th value symbol. A chunk compressed into too few tokens cannot
//! keep all of its records, so the tokens given to the needle chunk matter.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{allocate, median, uniform_allocate};
use crate::domain::{segment_into_chunks, AllocationPlan, Budget, Chunk, RateSet, Strategy, TokenId};
use crate::error::{io_err, Error, Result};
use crate::scoring::{chunk_attention, chunk_ppl, combined_scores, ChunkSignals};
use crate::toymodel::{
    example_sequence, train, EncodedSequence, Question, ToyModel, ToyModelConfig, TrainOptions, TrainingExample,
};

/// Every chunk keeps at least this many compression tokens under dynamic
/// allocation.
pub const MIN_PER_CHUNK: usize = 1;

const FILLER_WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "was", "for", "on", "as", "with", "by", "at", "from", "it",
    "an", "be", "this", "are", "or", "had", "not", "but", "his", "they", "one", "all", "were",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleTaskConfig {
    pub n_chunks: usize,
    pub chunk_len: usize,
    /// Chunk holding the queried key, 0-based.
    pub needle_position: usize,
    /// Keys are drawn from the first `key_alphabet` uppercase letters.
    pub key_alphabet: usize,
    /// Value symbols are drawn from the first `value_alphabet` digits.
    pub value_alphabet: usize,
    pub value_len: usize,
    /// Key-value records in every chunk. The needle chunk holds the queried
    /// record in a random slot plus `pairs_per_chunk - 1` distractors.
    pub pairs_per_chunk: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for NeedleTaskConfig {
    fn default() -> Self {
        Self {
            n_chunks: 8,
            chunk_len: 32,
            needle_position: 0,
            key_alphabet: 26,
            value_alphabet: 10,
            value_len: 3,
            pairs_per_chunk: 1,
            trials: 200,
            seed: 0,
        }
    }
}

impl NeedleTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(m));
        if self.n_chunks == 0 {
            return bad("n_chunks must be >= 1".into());
        }
        if self.needle_position >= self.n_chunks {
            return bad(format!(
                "needle_position {} is outside 0..{}",
                self.needle_position, self.n_chunks
            ));
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if !(1..=26).contains(&self.key_alphabet) {
            return bad(format!("key_alphabet {} must be in 1..=26", self.key_alphabet));
        }
        if !(1..=10).contains(&self.value_alphabet) {
            return bad(format!("value_alphabet {} must be in 1..=10", self.value_alphabet));
        }
        if !(1..=10).contains(&self.value_len) {
            return bad(format!("value_len {} must be in 1..=10", self.value_len));
        }
        if self.pairs_per_chunk == 0 {
            return bad("pairs_per_chunk must be >= 1".into());
        }
        let keys_needed = self.n_chunks * self.pairs_per_chunk;
        if self.key_alphabet < keys_needed {
            return bad(format!(
                "key_alphabet {} cannot give {keys_needed} distinct keys",
                self.key_alphabet
            ));
        }
        let records = self.pairs_per_chunk * self.record_len();
        if records > self.chunk_len {
            return bad(format!(
                "{records} record tokens do not fit in a chunk of {}",
                self.chunk_len
            ));
        }
        Ok(())
    }

    fn record_len(&self) -> usize {
        self.value_len + 2
    }

    fn with_position(&self, p: usize) -> Self {
        Self {
            needle_position: p,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleTask {
    pub document: Vec<TokenId>,
    pub query: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub needle_position: usize,
    pub key: TokenId,
}

impl NeedleTask {
    pub fn to_example(&self) -> TrainingExample {
        TrainingExample {
            document: self.document.clone(),
            questions: vec![Question {
                query: self.query.clone(),
                answer: self.answer.clone(),
            }],
        }
    }
}

/// SplitMix64 finalizer over a root seed and a path of indices.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut z = root;
    for &p in path {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xd1b5_4a32_d192_ed03));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn fill_chunk(rng: &mut ChaCha8Rng, chunk: &mut Vec<TokenId>, len: usize) {
    while chunk.len() < len {
        let word = FILLER_WORDS.choose(rng).expect("non-empty word list");
        for &b in word.as_bytes().iter().chain(b" ") {
            if chunk.len() == len {
                break;
            }
            chunk.push(b as TokenId);
        }
    }
}

struct Record {
    key: TokenId,
    value: Vec<TokenId>,
}

/// A document plus every record in it, needle first.
fn gen_document(cfg: &NeedleTaskConfig, needle_position: usize, rng: &mut ChaCha8Rng) -> (Vec<TokenId>, Vec<Record>) {
    let mut keys: Vec<u8> = (b'A'..b'A' + cfg.key_alphabet as u8).collect();
    keys.shuffle(rng);
    let mut keys = keys.into_iter();
    let needle_slot = rng.gen_range(0..cfg.pairs_per_chunk);
    let mut document = Vec::with_capacity(cfg.n_chunks * cfg.chunk_len);
    let mut needle = None;
    let mut others = Vec::new();
    for c in 0..cfg.n_chunks {
        let mut chunk = Vec::with_capacity(cfg.chunk_len);
        for slot in 0..cfg.pairs_per_chunk {
            let key = keys.next().expect("validated key supply") as TokenId;
            let value: Vec<TokenId> = (0..cfg.value_len)
                .map(|_| (b'0' + rng.gen_range(0..cfg.value_alphabet) as u8) as TokenId)
                .collect();
            chunk.push(key);
            chunk.extend(&value);
            chunk.push(b' ' as TokenId);
            let record = Record { key, value };
            if c == needle_position && slot == needle_slot {
                needle = Some(record);
            } else {
                others.push(record);
            }
        }
        fill_chunk(rng, &mut chunk, cfg.chunk_len);
        document.extend(chunk);
    }
    let mut records = vec![needle.expect("needle position is in range")];
    records.extend(others);
    (document, records)
}

fn question(record: &Record, j: usize) -> Question {
    Question {
        query: vec![(b'0' + j as u8) as TokenId, record.key],
        answer: vec![record.value[j]],
    }
}

fn gen_task(cfg: &NeedleTaskConfig, needle_position: usize, rng: &mut ChaCha8Rng) -> NeedleTask {
    let (document, records) = gen_document(cfg, needle_position, rng);
    let j = rng.gen_range(0..cfg.value_len);
    let q = question(&records[0], j);
    NeedleTask {
        document,
        query: q.query,
        answer: q.answer,
        needle_position,
        key: records[0].key,
    }
}

/// `cfg.trials` tasks with the needle at `cfg.needle_position`.
pub fn gen_needle_corpus(cfg: &NeedleTaskConfig) -> Result<Vec<NeedleTask>> {
    cfg.validate()?;
    Ok((0..cfg.trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[cfg.needle_position as u64, t as u64]));
            gen_task(cfg, cfg.needle_position, &mut rng)
        })
        .collect())
}

/// `n` training documents with the needle position drawn uniformly. Each
/// asks `questions` distinct (record, value index) questions, or all of them
/// when fewer exist.
pub fn gen_training_corpus(cfg: &NeedleTaskConfig, n: usize, questions: usize, seed: u64) -> Result<Vec<TrainingExample>> {
    cfg.validate()?;
    if questions == 0 {
        return Err(Error::InvalidTask("questions per document must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let p = rng.gen_range(0..cfg.n_chunks);
            let (document, records) = gen_document(cfg, p, &mut rng);
            let mut asked: Vec<Question> = records
                .iter()
                .flat_map(|r| (0..cfg.value_len).map(move |j| question(r, j)))
                .collect();
            asked.shuffle(&mut rng);
            asked.truncate(questions);
            TrainingExample {
                document,
                questions: asked,
            }
        })
        .collect())
}

/// Training setup for the reference needle model used by the benchmarks.
///
/// Training documents have 4 chunks of 16 tokens, so every chunk is mostly
/// record and the answer signal is dense. The model still generalizes to
/// the default benchmark task (8 chunks of 32 with filler after the record).
/// Full-length training documents stayed at chance within a CPU budget.
///
/// Some initializations stall on a plateau where the answer is averaged
/// over every record. A run whose mean loss over its last tenth of steps
/// stays above `accept_loss` is restarted from a fresh seed, up to
/// `attempts` times; only the training loss decides.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleRecipe {
    pub model: ToyModelConfig,
    pub train: TrainOptions,
    /// Task the training corpus is drawn from.
    pub task: NeedleTaskConfig,
    pub documents: usize,
    pub questions: usize,
    pub attempts: usize,
    pub accept_loss: f64,
}

impl NeedleRecipe {
    pub fn new(seed: u64) -> Self {
        Self {
            model: ToyModelConfig {
                d_model: 32,
                n_heads: 2,
                d_ff: 64,
                n_layers: 2,
                seed,
                ..ToyModelConfig::default()
            },
            train: TrainOptions {
                steps: 5000,
                step_size: 3e-3,
                batch_size: 8,
                chunk_len: 16,
                min_ct: 3,
                max_ct: 8,
                lm_weight: 0.0,
                seed,
                ..TrainOptions::default()
            },
            task: NeedleTaskConfig {
                n_chunks: 4,
                chunk_len: 16,
                ..NeedleTaskConfig::default()
            },
            documents: 4000,
            questions: 16,
            attempts: 4,
            accept_loss: 0.3,
        }
    }

    /// The first accepted run, or the one with the lowest final loss when
    /// none is accepted.
    pub fn run(&self) -> Result<NeedleRun> {
        let corpus = gen_training_corpus(&self.task, self.documents, self.questions, derive_seed(self.train.seed, &[1]))?;
        let mut best: Option<NeedleRun> = None;
        for attempt in 0..self.attempts.max(1) {
            // Attempt 0 keeps the configured seeds.
            let reseed = |s: u64| if attempt == 0 { s } else { derive_seed(s, &[2, attempt as u64]) };
            let config = ToyModelConfig {
                seed: reseed(self.model.seed),
                ..self.model.clone()
            };
            let opts = TrainOptions {
                seed: reseed(self.train.seed),
                ..self.train.clone()
            };
            let (model, losses) = train(&ToyModel::new(config)?, &corpus, &opts)?;
            let tail = &losses[losses.len() - losses.len().div_ceil(10)..];
            let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            let run = NeedleRun {
                model,
                losses,
                final_loss,
                attempt,
            };
            if final_loss < self.accept_loss {
                return Ok(run);
            }
            if best.as_ref().map_or(true, |b| final_loss < b.final_loss) {
                best = Some(run);
            }
        }
        Ok(best.expect("at least one attempt"))
    }
}

#[derive(Debug, Clone)]
pub struct NeedleRun {
    pub model: ToyModel,
    pub losses: Vec<f64>,
    /// Mean loss over the last tenth of steps.
    pub final_loss: f64,
    /// 0-based index of the attempt that produced `model`.
    pub attempt: usize,
}

/// [`NeedleRecipe::new`] run with `seed`.
pub fn train_needle_model(seed: u64) -> Result<NeedleRun> {
    NeedleRecipe::new(seed).run()
}

/// Tasks for the comparison sweeps: trial `t` puts the needle in chunk
/// `t mod n_chunks`.
fn rotating_corpus(cfg: &NeedleTaskConfig) -> Result<Vec<NeedleTask>> {
    cfg.validate()?;
    Ok((0..cfg.trials)
        .map(|t| {
            let p = t % cfg.n_chunks;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::MAX, t as u64]));
            gen_task(cfg, p, &mut rng)
        })
        .collect())
}

/// Chunk signals from one pass with `counts` compression tokens per chunk.
pub fn measure_signals(model: &ToyModel, chunks: &[Chunk], counts: &[usize], query: &[TokenId]) -> Result<ChunkSignals> {
    let seq = EncodedSequence::new(chunks, counts, Some(query))?;
    let (logprobs, attn) = model.analyze(&seq)?;
    let ppl = logprobs.iter().map(|lp| chunk_ppl(lp)).collect::<Result<Vec<_>>>()?;
    let a = chunk_attention(&attn.weights, &attn.ownership, chunks.len())?;
    ChunkSignals::new(ppl, a)
}

/// Builds the plan a strategy would use for one document.
///
/// Dynamic plans score chunks from a first pass under uniform allocation.
/// Baseline plans skip that pass; when reallocated they rank chunks by index.
pub fn plan_for(
    model: &ToyModel,
    chunks: &[Chunk],
    query: &[TokenId],
    strategy: Strategy,
    budget: Budget,
    alpha: f64,
    rateset: Option<&RateSet>,
    seed: u64,
) -> Result<AllocationPlan> {
    let n = chunks.len();
    let scores = match strategy {
        Strategy::Dynamic => {
            let probe = uniform_allocate(n, budget)?;
            let signals = measure_signals(model, chunks, &probe.counts, query)?;
            Some(combined_scores(&signals, alpha)?)
        }
        Strategy::Uniform | Strategy::Random => None,
    };
    allocate(strategy, n, scores.as_ref(), budget, alpha, MIN_PER_CHUNK, rateset, seed).map(|(plan, _)| plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Position,
    Strategy,
    Constraint,
    Alpha,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Position => "position",
            SweepKind::Strategy => "strategy",
            SweepKind::Constraint => "constraint",
            SweepKind::Alpha => "alpha",
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(SweepKind::Position),
            "strategy" => Ok(SweepKind::Strategy),
            "constraint" => Ok(SweepKind::Constraint),
            "alpha" => Ok(SweepKind::Alpha),
            other => Err(Error::InvalidTask(format!("unknown sweep kind {other:?}"))),
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub strategy: Strategy,
    pub alpha: f64,
    pub budget: usize,
    pub needle_position: usize,
    pub tokens_on_needle_chunk: usize,
    pub median_tokens_elsewhere: f64,
    pub residual: usize,
    pub expected: String,
    pub predicted: String,
    pub retrieval_correct: bool,
}

impl TrialRecord {
    pub fn needle_above_median(&self) -> bool {
        self.tokens_on_needle_chunk as f64 > self.median_tokens_elsewhere
    }
}

/// Aggregates for one (strategy, alpha, budget, needle position) cell;
/// `needle_position` is `None` when the cell pools all positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub strategy: Strategy,
    pub alpha: f64,
    pub budget: usize,
    pub needle_position: Option<usize>,
    pub trials: usize,
    pub accuracy: f64,
    pub mean_tokens_on_needle_chunk: f64,
    pub mean_median_tokens_elsewhere: f64,
    pub needle_above_median_rate: f64,
}

/// Accuracy drop relative to the loosest budget of the same strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub strategy: Strategy,
    pub budget: usize,
    pub accuracy: f64,
    pub relative_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub kind: SweepKind,
    pub task: NeedleTaskConfig,
    pub rates: Option<Vec<usize>>,
    pub conditions: Vec<ConditionSummary>,
    pub degradation: Vec<Degradation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub kind: SweepKind,
    pub task: NeedleTaskConfig,
    pub rates: Option<Vec<usize>>,
    pub rows: Vec<TrialRecord>,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a TrialRecord>) -> (usize, f64, f64, f64, f64) {
    let (mut n, mut correct, mut needle, mut elsewhere, mut above) = (0usize, 0usize, 0.0, 0.0, 0usize);
    for r in rows {
        n += 1;
        correct += r.retrieval_correct as usize;
        needle += r.tokens_on_needle_chunk as f64;
        elsewhere += r.median_tokens_elsewhere;
        above += r.needle_above_median() as usize;
    }
    let d = n.max(1) as f64;
    (n, correct as f64 / d, needle / d, elsewhere / d, above as f64 / d)
}

impl BenchReport {
    /// Aggregates per condition, recomputed from the rows. Position sweeps
    /// get one cell per needle position; other sweeps pool positions.
    pub fn conditions(&self) -> Vec<ConditionSummary> {
        let by_position = self.kind == SweepKind::Position;
        let mut groups: BTreeMap<(Strategy, u64, usize, Option<usize>), Vec<&TrialRecord>> = BTreeMap::new();
        for r in &self.rows {
            let p = by_position.then_some(r.needle_position);
            groups
                .entry((r.strategy, r.alpha.to_bits(), r.budget, p))
                .or_default()
                .push(r);
        }
        let mut out: Vec<ConditionSummary> = groups
            .into_iter()
            .map(|((strategy, alpha, budget, needle_position), rows)| {
                let (trials, accuracy, needle, elsewhere, above) = summarize(rows.into_iter());
                ConditionSummary {
                    strategy,
                    alpha: f64::from_bits(alpha),
                    budget,
                    needle_position,
                    trials,
                    accuracy,
                    mean_tokens_on_needle_chunk: needle,
                    mean_median_tokens_elsewhere: elsewhere,
                    needle_above_median_rate: above,
                }
            })
            .collect();
        out.sort_by(|a, b| {
            a.strategy
                .cmp(&b.strategy)
                .then(b.budget.cmp(&a.budget))
                .then(a.needle_position.cmp(&b.needle_position))
                .then(a.alpha.total_cmp(&b.alpha))
        });
        out
    }

    pub fn condition(&self, strategy: Strategy) -> Option<ConditionSummary> {
        self.conditions().into_iter().find(|c| c.strategy == strategy)
    }

    /// Relative accuracy drop per strategy against its loosest budget,
    /// budgets in descending order. Zero baseline accuracy yields zero drop.
    pub fn degradation(&self) -> Vec<Degradation> {
        if self.kind != SweepKind::Constraint {
            return Vec::new();
        }
        let mut per: BTreeMap<Strategy, BTreeMap<usize, Vec<&TrialRecord>>> = BTreeMap::new();
        for r in &self.rows {
            per.entry(r.strategy).or_default().entry(r.budget).or_default().push(r);
        }
        let mut out = Vec::new();
        for (strategy, budgets) in per {
            let accs: Vec<(usize, f64)> = budgets
                .into_iter()
                .rev()
                .map(|(b, rows)| (b, summarize(rows.into_iter()).1))
                .collect();
            let base = accs[0].1;
            for (budget, accuracy) in accs {
                let relative_drop = if base > 0.0 { (base - accuracy) / base } else { 0.0 };
                out.push(Degradation {
                    strategy,
                    budget,
                    accuracy,
                    relative_drop,
                });
            }
        }
        out
    }

    pub fn summary(&self) -> BenchSummary {
        BenchSummary {
            kind: self.kind,
            task: self.task.clone(),
            rates: self.rates.clone(),
            conditions: self.conditions(),
            degradation: self.degradation(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.summary())?;
        w.write_all(b"\n").map_err(serde_json::Error::io)?;
        Ok(())
    }

    /// Writes `<stem>.csv` (rows) and `<stem>.json` (summary).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let csv_path = stem.with_extension("csv");
        let json_path = stem.with_extension("json");
        self.write_csv(BufWriter::new(File::create(&csv_path).map_err(io_err(&csv_path))?))?;
        self.write_summary(BufWriter::new(File::create(&json_path).map_err(io_err(&json_path))?))
    }

    pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
    }
}

fn token_string(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| char::from_u32(t).filter(|c| c.is_ascii_graphic()).unwrap_or('?'))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Condition {
    strategy: Strategy,
    alpha: f64,
    budget: usize,
}

fn run_trial(
    model: &ToyModel,
    task: &NeedleTask,
    chunk_len: usize,
    cond: Condition,
    trial: usize,
    rateset: Option<&RateSet>,
    seed: u64,
) -> Result<TrialRecord> {
    let chunks = segment_into_chunks(&task.document, chunk_len)?;
    let plan = plan_for(
        model,
        &chunks,
        &task.query,
        cond.strategy,
        Budget::new(cond.budget),
        cond.alpha,
        rateset,
        seed,
    )?;
    let predicted = model.greedy_answer(&chunks, &plan.counts, &task.query, task.answer.len())?;
    let p = task.needle_position;
    let others: Vec<usize> = plan
        .counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != p)
        .map(|(_, &c)| c)
        .collect();
    Ok(TrialRecord {
        trial,
        strategy: cond.strategy,
        alpha: cond.alpha,
        budget: cond.budget,
        needle_position: p,
        tokens_on_needle_chunk: plan.counts[p],
        median_tokens_elsewhere: median(&others),
        residual: plan.residual,
        expected: token_string(&task.answer),
        predicted: token_string(&predicted),
        retrieval_correct: predicted == task.answer,
    })
}

/// Mean answer loss over at most 16 tasks under uniform allocation must be
/// below the loss of predicting uniformly over the vocabulary.
pub fn check_not_degenerate(model: &ToyModel, tasks: &[NeedleTask], chunk_len: usize, budget: usize) -> Result<f64> {
    let sample: Vec<_> = tasks.iter().take(16).collect();
    let mut batch = Vec::with_capacity(sample.len());
    for task in sample {
        let n = task.document.len().div_ceil(chunk_len);
        let plan = uniform_allocate(n, Budget::new(budget))?;
        batch.push(example_sequence(&task.to_example(), chunk_len, &plan.counts, 0.0)?);
    }
    let loss = model.loss(&batch)?;
    let baseline = (model.config().vocab_size as f64).ln();
    if !(loss < baseline) {
        return Err(Error::DegenerateModel { loss, baseline });
    }
    Ok(loss)
}

fn check_budget(cfg: &NeedleTaskConfig, budget: usize) -> Result<()> {
    if budget < cfg.n_chunks * MIN_PER_CHUNK {
        return Err(Error::InfeasibleBudget {
            budget,
            n_chunks: cfg.n_chunks,
            per_chunk: MIN_PER_CHUNK,
        });
    }
    Ok(())
}

/// Evaluates every (condition, task) pair in parallel; rows come back in
/// condition-major order regardless of scheduling.
fn run_grid(
    model: &ToyModel,
    cfg: &NeedleTaskConfig,
    tasks: &[NeedleTask],
    conds: &[Condition],
    rateset: Option<&RateSet>,
    salt: u64,
) -> Result<Vec<TrialRecord>> {
    let jobs: Vec<(usize, usize)> = (0..conds.len())
        .flat_map(|c| (0..tasks.len()).map(move |t| (c, t)))
        .collect();
    jobs.par_iter()
        .map(|&(c, t)| {
            // Independent of strategy and alpha, so random plans are paired
            // across those conditions.
            let seed = derive_seed(cfg.seed, &[salt, t as u64, conds[c].budget as u64]);
            run_trial(model, &tasks[t], cfg.chunk_len, conds[c], t, rateset, seed)
        })
        .collect()
}

fn strategies_or_all(strategies: &[Strategy]) -> Vec<Strategy> {
    if strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        strategies.to_vec()
    }
}

fn report(kind: SweepKind, cfg: &NeedleTaskConfig, rateset: Option<&RateSet>, rows: Vec<TrialRecord>) -> BenchReport {
    BenchReport {
        kind,
        task: cfg.clone(),
        rates: rateset.map(|r| r.rates().collect()),
        rows,
    }
}

/// For each needle position, `cfg.trials` fresh tasks under each strategy.
pub fn run_position_sweep(
    model: &ToyModel,
    cfg: &NeedleTaskConfig,
    budget: usize,
    alpha: f64,
    rateset: Option<&RateSet>,
    strategies: &[Strategy],
) -> Result<BenchReport> {
    cfg.validate()?;
    check_budget(cfg, budget)?;
    let conds: Vec<Condition> = strategies_or_all(strategies)
        .into_iter()
        .map(|strategy| Condition { strategy, alpha, budget })
        .collect();
    let mut rows = Vec::new();
    for p in 0..cfg.n_chunks {
        let tasks = gen_needle_corpus(&cfg.with_position(p))?;
        if p == 0 {
            check_not_degenerate(model, &tasks, cfg.chunk_len, budget)?;
        }
        rows.extend(run_grid(model, cfg, &tasks, &conds, rateset, 1 + p as u64)?);
    }
    Ok(report(SweepKind::Position, cfg, rateset, rows))
}

/// The same tasks under each strategy; needle positions rotate over trials.
pub fn run_strategy_comparison(
    model: &ToyModel,
    cfg: &NeedleTaskConfig,
    budget: usize,
    alpha: f64,
    rateset: Option<&RateSet>,
    strategies: &[Strategy],
) -> Result<BenchReport> {
    cfg.validate()?;
    check_budget(cfg, budget)?;
    let tasks = rotating_corpus(cfg)?;
    check_not_degenerate(model, &tasks, cfg.chunk_len, budget)?;
    let conds: Vec<Condition> = strategies_or_all(strategies)
        .into_iter()
        .map(|strategy| Condition { strategy, alpha, budget })
        .collect();
    let rows = run_grid(model, cfg, &tasks, &conds, rateset, 0)?;
    Ok(report(SweepKind::Strategy, cfg, rateset, rows))
}

/// The same tasks at every budget (descending) under each strategy.
pub fn run_constraint_sweep(
    model: &ToyModel,
    cfg: &NeedleTaskConfig,
    budgets: &[usize],
    alpha: f64,
    rateset: Option<&RateSet>,
    strategies: &[Strategy],
) -> Result<BenchReport> {
    cfg.validate()?;
    if budgets.is_empty() {
        return Err(Error::InvalidTask("at least one budget is required".into()));
    }
    if budgets.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidTask(format!("budgets {budgets:?} must be strictly descending")));
    }
    for &b in budgets {
        check_budget(cfg, b)?;
    }
    let tasks = rotating_corpus(cfg)?;
    check_not_degenerate(model, &tasks, cfg.chunk_len, budgets[0])?;
    let conds: Vec<Condition> = strategies_or_all(strategies)
        .into_iter()
        .flat_map(|strategy| budgets.iter().map(move |&budget| Condition { strategy, alpha, budget }))
        .collect();
    let rows = run_grid(model, cfg, &tasks, &conds, rateset, 0)?;
    Ok(report(SweepKind::Constraint, cfg, rateset, rows))
}

/// Dynamic allocation on the same tasks at every blend weight.
pub fn run_alpha_sweep(
    model: &ToyModel,
    cfg: &NeedleTaskConfig,
    budget: usize,
    alphas: &[f64],
    rateset: Option<&RateSet>,
) -> Result<BenchReport> {
    cfg.validate()?;
    check_budget(cfg, budget)?;
    if let Some(&a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidAlpha(a));
    }
    let tasks = rotating_corpus(cfg)?;
    check_not_degenerate(model, &tasks, cfg.chunk_len, budget)?;
    let conds: Vec<Condition> = alphas
        .iter()
        .map(|&alpha| Condition {
            strategy: Strategy::Dynamic,
            alpha,
            budget,
        })
        .collect();
    let rows = run_grid(model, cfg, &tasks, &conds, rateset, 0)?;
    Ok(report(SweepKind::Alpha, cfg, rateset, rows))
}
