use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use softalloc::allocator::allocate;
use softalloc::bench::{
    gen_training_corpus, measure_signals, run_alpha_sweep, run_constraint_sweep, run_position_sweep,
    run_strategy_comparison, NeedleTaskConfig, SweepKind, MIN_PER_CHUNK,
};
use softalloc::signals_io::{read_signals, write_plan, write_signals, ChunkRecord, SignalTrace};
use softalloc::toymodel::{
    gradcheck_fixture, gradient_check, load_checkpoint, read_corpus, save_checkpoint, train, write_corpus,
    ToyModel, ToyModelConfig, TrainOptions,
};
use softalloc::{combined_scores, segment_into_chunks, Budget, RateSet, Strategy};

const DEFAULT_RATES: &str = "2,4,8,16,32";
const SWEEP_KINDS: &str = "position, strategy, constraint, alpha";

#[derive(Parser)]
#[command(name = "softalloc", version, about = "Allocate compression tokens across context chunks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy compression model on a JSONL corpus.
    TrainToy(TrainToyArgs),
    /// Measure per-chunk perplexity and query attention for a document.
    Score(ScoreArgs),
    /// Turn a signal trace into a budget allocation plan.
    Allocate(AllocateArgs),
    /// Run a needle-retrieval sweep and write CSV and JSON reports.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients of the toy model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic needle training corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
struct TrainToyArgs {
    /// Training corpus, one JSON example per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Peak Adam learning rate.
    #[arg(long, default_value_t = 3e-3)]
    step_size: f64,
    /// Seeds both initialization and batch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV; defaults to the checkpoint path plus `.loss.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    chunk_len: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Compression-token counts per chunk are drawn from min-ct..=max-ct.
    #[arg(long, default_value_t = 1)]
    min_ct: usize,
    #[arg(long, default_value_t = 8)]
    max_ct: usize,
    #[arg(long, default_value_t = 0.5)]
    lm_weight: f64,
    #[arg(long, default_value_t = 48)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 96)]
    d_ff: usize,
    #[arg(long, default_value_t = 512)]
    max_positions: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Document file; every byte is one token.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 32)]
    chunk_len: usize,
    /// Query whose attention ranks the chunks.
    #[arg(long, default_value = "")]
    query: String,
    /// Compression tokens per chunk in the measuring pass.
    #[arg(long, default_value_t = 4)]
    probe_tokens: usize,
    /// Defaults to the input file stem.
    #[arg(long)]
    doc_id: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value = "dynamic")]
    strategy: Strategy,
    /// Permitted compression rates. Without the flag no reallocation happens;
    /// the bare flag selects 2,4,8,16,32.
    #[arg(long, num_args = 0..=1, default_missing_value = DEFAULT_RATES, value_delimiter = ',')]
    rates: Option<Vec<usize>>,
    #[arg(long, default_value_t = 32)]
    chunk_len: usize,
    /// Seed of the random strategy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Document to allocate when the trace holds several.
    #[arg(long)]
    doc_id: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Task config as JSON; defaults to the built-in needle task.
    #[arg(long)]
    task: Option<PathBuf>,
    /// One of position, strategy, constraint, alpha.
    #[arg(long, value_parser = parse_kind)]
    kind: SweepKind,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report stem; `<out>.csv` and `<out>.json` are written.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    budget: usize,
    /// Budgets of the constraint sweep, strictly descending.
    #[arg(long, value_delimiter = ',', default_value = "32,24,16,8")]
    budgets: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Blend weights of the alpha sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    alphas: Vec<f64>,
    /// As for `allocate`.
    #[arg(long, num_args = 0..=1, default_missing_value = DEFAULT_RATES, value_delimiter = ',')]
    rates: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "dynamic,uniform,random")]
    strategies: Vec<Strategy>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 240, value_parser = parse_samples)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    examples: usize,
    /// Questions drawn per document.
    #[arg(long, default_value_t = 16)]
    questions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Task config as JSON; defaults to the built-in needle task.
    #[arg(long)]
    task: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<SweepKind, String> {
    s.parse()
        .map_err(|_| format!("unknown sweep kind `{s}` (valid kinds: {SWEEP_KINDS})"))
}

fn parse_samples(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("samples must be ≥ 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::TrainToy(a) => train_toy(a),
        Command::Score(a) => score(a),
        Command::Allocate(a) => allocate_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenCorpus(a) => gen_corpus(a),
    }
}

fn train_toy(a: TrainToyArgs) -> Result<Outcome> {
    let corpus = read_corpus(&a.corpus).context("reading --corpus")?;
    let config = ToyModelConfig {
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        max_positions: a.max_positions,
        seed: a.seed,
        ..ToyModelConfig::default()
    };
    let model = ToyModel::new(config)?;
    let opts = TrainOptions {
        steps: a.steps,
        step_size: a.step_size,
        seed: a.seed,
        batch_size: a.batch_size,
        chunk_len: a.chunk_len,
        min_ct: a.min_ct,
        max_ct: a.max_ct,
        lm_weight: a.lm_weight,
        ..TrainOptions::default()
    };
    eprintln!("training on {} examples for {} steps", corpus.len(), a.steps);
    let (model, losses) = train(&model, &corpus, &opts)?;
    save_checkpoint(&model, &a.out)?;
    let log = a.loss_log.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    let mut w = BufWriter::new(File::create(&log).with_context(|| format!("creating {}", log.display()))?);
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    if let Some(last) = losses.last() {
        eprintln!("final loss {last:.4}");
    }
    eprintln!("wrote {} and {}", a.out.display(), log.display());
    Ok(Outcome::Ok)
}

fn score(a: ScoreArgs) -> Result<Outcome> {
    let model = load_checkpoint(&a.model)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let tokens: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
    let chunks = segment_into_chunks(&tokens, a.chunk_len)?;
    if a.probe_tokens == 0 {
        bail!("--probe-tokens must be ≥ 1");
    }
    let counts = vec![a.probe_tokens; chunks.len()];
    let query: Vec<u32> = a.query.bytes().map(u32::from).collect();
    let signals = measure_signals(&model, &chunks, &counts, &query)?;
    let doc_id = a.doc_id.unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "doc".into())
    });
    let trace = SignalTrace {
        doc_id,
        chunks: chunks
            .iter()
            .zip(signals.ppl.iter().zip(&signals.attn))
            .map(|(c, (&ppl, &attn))| ChunkRecord {
                chunk_id: c.index,
                len: c.len(),
                ppl,
                attn,
            })
            .collect(),
    };
    write_signals(&a.out, &[trace])?;
    eprintln!("wrote {} chunks to {}", chunks.len(), a.out.display());
    Ok(Outcome::Ok)
}

fn allocate_cmd(a: AllocateArgs) -> Result<Outcome> {
    let traces = read_signals(&a.trace)?;
    let trace = match (&a.doc_id, traces.as_slice()) {
        (Some(id), _) => traces
            .iter()
            .find(|t| &t.doc_id == id)
            .with_context(|| format!("doc_id {id:?} not in {}", a.trace.display()))?,
        (None, [t]) => t,
        (None, []) => bail!("{} holds no documents", a.trace.display()),
        (None, _) => bail!("{} holds {} documents; pick one with --doc-id", a.trace.display(), traces.len()),
    };
    let rates = rate_set(a.rates.as_deref(), a.chunk_len)?;
    let n = trace.chunks.len();
    let scores = match a.strategy {
        Strategy::Dynamic => Some(combined_scores(&trace.signals()?, a.alpha)?),
        _ => {
            if !(0.0..=1.0).contains(&a.alpha) {
                bail!("alpha must lie in [0, 1], got {}", a.alpha);
            }
            None
        }
    };
    let (plan, scores) = allocate(
        a.strategy,
        n,
        scores.as_ref(),
        Budget::new(a.budget),
        a.alpha,
        MIN_PER_CHUNK,
        rates.as_ref(),
        a.seed,
    )?;
    write_plan(&a.out, &plan, &scores)?;
    eprintln!("counts {:?} residual {}", plan.counts, plan.residual);
    Ok(Outcome::Ok)
}

fn bench(a: BenchArgs) -> Result<Outcome> {
    let model = load_checkpoint(&a.model)?;
    let mut task = load_task(a.task.as_deref())?;
    if let Some(t) = a.trials {
        task.trials = t;
    }
    if let Some(s) = a.seed {
        task.seed = s;
    }
    let rates = rate_set(a.rates.as_deref(), task.chunk_len)?;
    let rates = rates.as_ref();
    let report = match a.kind {
        SweepKind::Position => run_position_sweep(&model, &task, a.budget, a.alpha, rates, &a.strategies)?,
        SweepKind::Strategy => run_strategy_comparison(&model, &task, a.budget, a.alpha, rates, &a.strategies)?,
        SweepKind::Constraint => run_constraint_sweep(&model, &task, &a.budgets, a.alpha, rates, &a.strategies)?,
        SweepKind::Alpha => run_alpha_sweep(&model, &task, a.budget, &a.alphas, rates)?,
    };
    report.save(&a.out)?;
    for c in report.conditions() {
        eprintln!(
            "{} alpha={:.2} budget={}{} accuracy={:.3} trials={}",
            c.strategy,
            c.alpha,
            c.budget,
            c.needle_position.map(|p| format!(" position={p}")).unwrap_or_default(),
            c.accuracy,
            c.trials
        );
    }
    eprintln!("wrote {}.csv and {}.json", a.out.display(), a.out.display());
    Ok(Outcome::Ok)
}

fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let (model, batch) = gradcheck_fixture(a.seed)?;
    let report = gradient_check(&model, &batch, a.samples, a.step, a.seed)?;
    let worst = report.worst().expect("at least one sample");
    let verdict = if report.max_rel_error <= a.tolerance { "PASS" } else { "FAIL" };
    println!(
        "{verdict} max_rel_error={:.3e} mean_rel_error={:.3e} samples={} worst={}[{}]",
        report.max_rel_error, report.mean_rel_error, a.samples, worst.tensor, worst.index
    );
    Ok(if verdict == "PASS" { Outcome::Ok } else { Outcome::Failed })
}

fn gen_corpus(a: GenCorpusArgs) -> Result<Outcome> {
    let task = load_task(a.task.as_deref())?;
    let corpus = gen_training_corpus(&task, a.examples, a.questions, a.seed)?;
    write_corpus(&a.out, &corpus)?;
    eprintln!("wrote {} examples to {}", corpus.len(), a.out.display());
    Ok(Outcome::Ok)
}

fn load_task(path: Option<&Path>) -> Result<NeedleTaskConfig> {
    let Some(path) = path else {
        return Ok(NeedleTaskConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let task: NeedleTaskConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing task config {}", path.display()))?;
    Ok(task)
}

fn rate_set(rates: Option<&[usize]>, chunk_len: usize) -> Result<Option<RateSet>> {
    let Some(rates) = rates else { return Ok(None) };
    Ok(Some(RateSet::new(rates.iter().copied(), chunk_len)?))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

