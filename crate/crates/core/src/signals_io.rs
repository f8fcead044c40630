//! Signal traces (JSON Lines) and allocation plans (JSON).
//!
//! A trace file holds one chunk per line:
//!
//! ```text
//! {"doc_id":"d0","chunk_id":0,"len":32,"ppl":41.7,"attn":0.12}
//! ```
//!
//! Consecutive lines sharing a `doc_id` form one document; their
//! `chunk_id`s must run 0, 1, 2, ... and a document may not reappear later
//! in the file. Blank lines are ignored.
//!
//! A plan file is a single object:
//!
//! ```text
//! {"budget":32,"alpha":0.5,"strategy":"dynamic","residual":0,
//!  "allocations":[{"chunk_id":0,"score":0.2,"count":7}, ...]}
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{AllocationPlan, Budget, Strategy};
use crate::error::{io_err, Error, Result};
use crate::scoring::{ChunkSignals, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: usize,
    pub len: usize,
    pub ppl: f64,
    pub attn: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    pub doc_id: String,
    pub chunks: Vec<ChunkRecord>,
}

impl SignalTrace {
    pub fn signals(&self) -> Result<ChunkSignals> {
        ChunkSignals::new(
            self.chunks.iter().map(|c| c.ppl).collect(),
            self.chunks.iter().map(|c| c.attn).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.chunks.iter().enumerate() {
            check_record(c, Some(i)).map_err(Error::InvalidSignals)?;
        }
        Ok(())
    }
}

/// One line of the trace file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    doc_id: String,
    chunk_id: usize,
    len: usize,
    ppl: f64,
    attn: f64,
}

fn check_record(c: &ChunkRecord, expected_id: Option<usize>) -> std::result::Result<(), String> {
    if let Some(id) = expected_id {
        if c.chunk_id != id {
            return Err(format!("chunk_id must be {id}, found {}", c.chunk_id));
        }
    }
    if c.len < 1 {
        return Err("len must be ≥ 1".into());
    }
    if !(c.ppl.is_finite() && c.ppl >= 0.0) {
        return Err("ppl must be ≥ 0".into());
    }
    if !(c.attn.is_finite() && c.attn >= 0.0) {
        return Err("attn must be ≥ 0".into());
    }
    Ok(())
}

/// Parses a trace stream; `path` only labels errors.
pub fn parse_signals<R: BufRead>(reader: R, path: &Path) -> Result<Vec<SignalTrace>> {
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut traces: Vec<SignalTrace> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text.map_err(io_err(path))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&text).map_err(|e| fail(line, e.to_string()))?;
        let chunk = ChunkRecord {
            chunk_id: rec.chunk_id,
            len: rec.len,
            ppl: rec.ppl,
            attn: rec.attn,
        };
        let continuing = traces.last().is_some_and(|t| t.doc_id == rec.doc_id);
        if !continuing {
            if !seen.insert(rec.doc_id.clone()) {
                return Err(fail(line, format!("doc_id {:?} is not contiguous", rec.doc_id)));
            }
            traces.push(SignalTrace {
                doc_id: rec.doc_id,
                chunks: Vec::new(),
            });
        }
        let trace = traces.last_mut().expect("just pushed");
        check_record(&chunk, Some(trace.chunks.len())).map_err(|m| fail(line, m))?;
        trace.chunks.push(chunk);
    }
    Ok(traces)
}

pub fn read_signals(path: impl AsRef<Path>) -> Result<Vec<SignalTrace>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    parse_signals(BufReader::new(file), path)
}

pub fn write_signals_to<W: Write>(mut w: W, traces: &[SignalTrace]) -> Result<()> {
    for t in traces {
        t.validate()?;
        for c in &t.chunks {
            let line = TraceLine {
                doc_id: t.doc_id.clone(),
                chunk_id: c.chunk_id,
                len: c.len,
                ppl: c.ppl,
                attn: c.attn,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(serde_json::Error::io)?;
        }
    }
    w.flush().map_err(serde_json::Error::io)?;
    Ok(())
}

pub fn write_signals(path: impl AsRef<Path>, traces: &[SignalTrace]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_signals_to(BufWriter::new(file), traces)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanAllocation {
    pub chunk_id: usize,
    pub score: f64,
    pub count: usize,
}

/// The on-disk plan document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub budget: usize,
    pub alpha: f64,
    pub strategy: Strategy,
    pub residual: usize,
    pub allocations: Vec<PlanAllocation>,
}

const SCORE_SUM_TOL: f64 = 1e-6;

impl PlanDocument {
    pub fn new(plan: &AllocationPlan, scores: &ScoreVector) -> Result<Self> {
        if plan.n_chunks() != scores.len() {
            return Err(Error::LengthMismatch(format!(
                "plan has {} chunks but {} scores",
                plan.n_chunks(),
                scores.len()
            )));
        }
        let doc = Self {
            budget: plan.budget.total,
            alpha: scores.alpha,
            strategy: plan.strategy,
            residual: plan.residual,
            allocations: plan
                .counts
                .iter()
                .zip(&scores.s)
                .enumerate()
                .map(|(chunk_id, (&count, &score))| PlanAllocation { chunk_id, score, count })
                .collect(),
        };
        doc.validate().map_err(Error::InvalidSignals)?;
        Ok(doc)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.allocations.is_empty() {
            return Err("plan has no allocations".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        for (i, a) in self.allocations.iter().enumerate() {
            if a.chunk_id != i {
                return Err(format!("allocation {i} has chunk_id {}", a.chunk_id));
            }
            if !(a.score.is_finite() && a.score >= 0.0) {
                return Err(format!("score of chunk {i} must be ≥ 0"));
            }
        }
        let total: usize = self.allocations.iter().map(|a| a.count).sum();
        if total + self.residual != self.budget {
            return Err(format!(
                "counts sum to {total} with residual {} but budget is {}",
                self.residual, self.budget
            ));
        }
        let s: f64 = self.allocations.iter().map(|a| a.score).sum();
        if (s - 1.0).abs() > SCORE_SUM_TOL {
            return Err(format!("scores sum to {s}, expected 1"));
        }
        Ok(())
    }

    pub fn into_parts(self) -> (AllocationPlan, ScoreVector) {
        let scores = ScoreVector {
            s: self.allocations.iter().map(|a| a.score).collect(),
            alpha: self.alpha,
        };
        let plan = AllocationPlan {
            counts: self.allocations.iter().map(|a| a.count).collect(),
            budget: Budget::new(self.budget),
            strategy: self.strategy,
            alpha: (self.strategy == Strategy::Dynamic).then_some(self.alpha),
            residual: self.residual,
        };
        (plan, scores)
    }
}

pub fn write_plan_to<W: Write>(mut w: W, plan: &AllocationPlan, scores: &ScoreVector) -> Result<()> {
    let doc = PlanDocument::new(plan, scores)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n").map_err(serde_json::Error::io)?;
    w.flush().map_err(serde_json::Error::io)?;
    Ok(())
}

pub fn write_plan(path: impl AsRef<Path>, plan: &AllocationPlan, scores: &ScoreVector) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_plan_to(BufWriter::new(file), plan, scores)
}

pub fn parse_plan(text: &str, path: &Path) -> Result<(AllocationPlan, ScoreVector)> {
    let fail = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let doc: PlanDocument = serde_json::from_str(text).map_err(|e| fail(e.line(), e.to_string()))?;
    doc.validate().map_err(|m| fail(0, m))?;
    Ok(doc.into_parts())
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<(AllocationPlan, ScoreVector)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_plan(&text, path)
}
