//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::domain::Chunk;
use crate::error::{Error, Result};

use super::{EncodedSequence, Target, ToyModel, ToyModelConfig, TrainingSequence};

/// Denominator floor so that parameters with (near) zero gradient compare
/// by absolute error instead of amplifying finite-difference noise.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub step: f64,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Sampled coordinates in sampling order.
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// The small model and batch the check runs on.
pub fn gradcheck_fixture(seed: u64) -> Result<(ToyModel, Vec<TrainingSequence>)> {
    let config = ToyModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_positions: 32,
        n_ct_embeddings: 3,
        seed,
        ..ToyModelConfig::default()
    };
    let model = ToyModel::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut batch = Vec::new();
    for counts in [[2usize, 1, 3], [1, 4, 2]] {
        let chunks: Vec<Chunk> = (0..3)
            .map(|i| Chunk {
                index: i,
                tokens: (0..4).map(|_| rng.gen_range(b'a'..=b'h') as u32).collect(),
            })
            .collect();
        let query: Vec<u32> = (0..2).map(|_| rng.gen_range(b'0'..=b'9') as u32).collect();
        let seq = EncodedSequence::new(&chunks, &counts, Some(&query))?;
        let mut targets: Vec<Target> = (0..3)
            .flat_map(|i| seq.chunk_targets(i))
            .map(|(p, t)| Target { position: p, token: t, weight: 0.5 })
            .collect();
        targets.push(Target::new(seq.last_position(), rng.gen_range(b'0'..=b'9') as u32));
        batch.push(TrainingSequence {
            input: seq.input,
            targets,
        });
    }
    Ok((model, batch))
}

/// Compares analytic and central-difference gradients on `samples`
/// coordinates, drawn round-robin across tensors so every tensor is covered.
pub fn gradient_check(
    model: &ToyModel,
    batch: &[TrainingSequence],
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step {step} must be > 0")));
    }
    let (_, grad) = model.loss_and_gradients(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = model.tensor_specs();
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(samples);
    for s in 0..samples {
        let spec = &specs[s % specs.len()];
        let index = rng.gen_range(0..spec.numel());
        let flat = spec.offset + index;
        let original = probe.params[flat];
        probe.params[flat] = original + step;
        let plus = probe.loss(batch)?;
        probe.params[flat] = original - step;
        let minus = probe.loss(batch)?;
        probe.params[flat] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grad[flat];
        entries.push(GradCheckEntry {
            tensor: spec.name.clone(),
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let mean_rel_error = entries.iter().map(|e| e.rel_error).sum::<f64>() / entries.len().max(1) as f64;
    Ok(GradCheckReport {
        n_params: model.n_params(),
        step,
        max_rel_error,
        mean_rel_error,
        entries,
    })
}
