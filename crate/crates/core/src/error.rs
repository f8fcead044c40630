use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid chunk length: {0}")]
    InvalidChunkLength(usize),

    #[error("empty chunk")]
    EmptyChunk,

    #[error("invalid log-probability {value} at token {index}")]
    InvalidLogProb { index: usize, value: f64 },

    #[error("invalid rate set: {0}")]
    InvalidRateSet(String),

    #[error("invalid signals: {0}")]
    InvalidSignals(String),

    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),

    #[error("chunk index {index} out of range for {n_chunks} chunks")]
    ChunkIndexOutOfRange { index: usize, n_chunks: usize },

    #[error("no chunks to allocate over")]
    NoChunks,

    #[error("infeasible budget: {budget} tokens cannot cover {n_chunks} chunks at {per_chunk} each")]
    InfeasibleBudget {
        budget: usize,
        n_chunks: usize,
        per_chunk: usize,
    },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("layout contains no compression-token positions")]
    NoCompressionTokens,

    #[error("chunk {0} has zero compression tokens")]
    ZeroCountChunk(usize),

    #[error("batch has no target positions")]
    NoTargets,

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid task config: {0}")]
    InvalidTask(String),

    #[error("degenerate model: mean answer loss {loss:.4} is not below the uniform baseline {baseline:.4}")]
    DegenerateModel { loss: f64, baseline: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
