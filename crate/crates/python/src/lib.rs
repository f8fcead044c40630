//! Python bindings for scoring, allocation and the toy model.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use softalloc::bench::{measure_signals, MIN_PER_CHUNK};
use softalloc::toymodel::{gradcheck_fixture, gradient_check, load_checkpoint, ToyModel};
use softalloc::{allocator, combined_scores, segment_into_chunks, Budget, ChunkSignals, Error, RateSet, ScoreVector, Strategy};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(PyValueError::new_err)
}

/// Softmax-blended chunk scores from perplexity and attention.
#[pyfunction]
#[pyo3(signature = (ppl, attn, alpha = 0.5))]
fn scores(ppl: Vec<f64>, attn: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let signals = ChunkSignals::new(ppl, attn).map_err(py_err)?;
    Ok(combined_scores(&signals, alpha).map_err(py_err)?.s)
}

/// Plan counts and residual for one strategy. `scores` is required for
/// "dynamic"; `rates` enables reallocation.
#[pyfunction]
#[pyo3(signature = (strategy_name, n_chunks, budget, scores = None, alpha = 0.5, rates = None, chunk_len = 32, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn allocate(
    strategy_name: &str,
    n_chunks: usize,
    budget: usize,
    scores: Option<Vec<f64>>,
    alpha: f64,
    rates: Option<Vec<usize>>,
    chunk_len: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, usize)> {
    let s = strategy(strategy_name)?;
    let scores = scores.map(|s| ScoreVector { s, alpha });
    let rates = rates
        .map(|r| RateSet::new(r, chunk_len))
        .transpose()
        .map_err(py_err)?;
    let (plan, _) = allocator::allocate(
        s,
        n_chunks,
        scores.as_ref(),
        Budget::new(budget),
        alpha,
        MIN_PER_CHUNK,
        rates.as_ref(),
        seed,
    )
    .map_err(py_err)?;
    Ok((plan.counts, plan.residual))
}

/// Counts a rate set permits for chunks of `chunk_len` tokens.
#[pyfunction]
fn valid_counts(rates: Vec<usize>, chunk_len: usize) -> PyResult<Vec<usize>> {
    let rates = RateSet::new(rates, chunk_len).map_err(py_err)?;
    Ok(allocator::valid_counts(&rates))
}

/// Maximum relative error of the finite-difference gradient check.
#[pyfunction]
#[pyo3(signature = (seed = 0, samples = 240))]
fn gradcheck(seed: u64, samples: usize) -> PyResult<f64> {
    let (model, batch) = gradcheck_fixture(seed).map_err(py_err)?;
    let report = gradient_check(&model, &batch, samples, 1e-5, seed).map_err(py_err)?;
    Ok(report.max_rel_error)
}

/// A trained toy model loaded from a checkpoint.
#[pyclass(name = "ToyModel", frozen)]
struct PyToyModel {
    inner: ToyModel,
}

#[pymethods]
impl PyToyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Per-chunk (ppl, attn) for `document` bytes under a uniform probe of
    /// `probe_tokens` compression tokens per chunk.
    #[pyo3(signature = (document, query, chunk_len = 32, probe_tokens = 4))]
    fn signals(&self, document: &[u8], query: &[u8], chunk_len: usize, probe_tokens: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let tokens: Vec<u32> = document.iter().map(|&b| b as u32).collect();
        let chunks = segment_into_chunks(&tokens, chunk_len).map_err(py_err)?;
        let query: Vec<u32> = query.iter().map(|&b| b as u32).collect();
        let counts = vec![probe_tokens; chunks.len()];
        let s = measure_signals(&self.inner, &chunks, &counts, &query).map_err(py_err)?;
        Ok((s.ppl, s.attn))
    }
}

#[pymodule]
fn softalloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(valid_counts, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyToyModel>()?;
    Ok(())
}
