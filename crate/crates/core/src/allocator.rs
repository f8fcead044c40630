//! Integer apportionment of a compression-token budget across chunks.
//!
//! Three allocators produce plans that spend the budget exactly:
//! [`dynamic_allocate`] (score-proportional, largest-remainder rounding),
//! [`uniform_allocate`] and [`random_allocate`]. [`reallocate`] then snaps a
//! plan onto the counts a [`RateSet`] permits and greedily doubles the
//! highest-scored chunks while leftover budget remains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{AllocationPlan, Budget, RateSet, Strategy};
use crate::error::{Error, Result};
use crate::scoring::ScoreVector;

/// Score-proportional allocation with a per-chunk floor.
///
/// Every chunk first receives `min_per_chunk`; the rest of the budget is
/// split in proportion to the scores and rounded by largest remainder, so the
/// counts always sum to `budget.total`.
pub fn dynamic_allocate(
    scores: &ScoreVector,
    budget: Budget,
    min_per_chunk: usize,
) -> Result<AllocationPlan> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::NoChunks);
    }
    let floor_total = n
        .checked_mul(min_per_chunk)
        .filter(|&t| t <= budget.total)
        .ok_or(Error::InfeasibleBudget {
            budget: budget.total,
            n_chunks: n,
            per_chunk: min_per_chunk,
        })?;
    let shares = largest_remainder(&scores.s, budget.total - floor_total);
    Ok(AllocationPlan {
        counts: shares.into_iter().map(|c| c + min_per_chunk).collect(),
        budget,
        strategy: Strategy::Dynamic,
        alpha: Some(scores.alpha),
        residual: 0,
    })
}

/// Apportions `seats` in proportion to non-negative `weights`.
fn largest_remainder(weights: &[f64], seats: usize) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if total > 0.0 {
        weights.iter().map(|w| w / total * seats as f64).collect()
    } else {
        vec![seats as f64 / n as f64; n]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut left = seats.saturating_sub(assigned);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa)
            .then(weights[b].total_cmp(&weights[a]))
            .then(a.cmp(&b))
    });
    // `left` is below n except for rounding corner cases; cycling keeps the
    // sum exact either way.
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Even split; the `M mod N` surplus goes to the lowest-index chunks.
pub fn uniform_allocate(n_chunks: usize, budget: Budget) -> Result<AllocationPlan> {
    if n_chunks == 0 {
        return Err(Error::NoChunks);
    }
    let base = budget.total / n_chunks;
    let surplus = budget.total % n_chunks;
    Ok(AllocationPlan {
        counts: (0..n_chunks)
            .map(|i| base + usize::from(i < surplus))
            .collect(),
        budget,
        strategy: Strategy::Uniform,
        alpha: None,
        residual: 0,
    })
}

/// Assigns each budget token to a uniformly drawn chunk.
pub fn random_allocate(n_chunks: usize, budget: Budget, seed: u64) -> Result<AllocationPlan> {
    if n_chunks == 0 {
        return Err(Error::NoChunks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0; n_chunks];
    for _ in 0..budget.total {
        counts[rng.gen_range(0..n_chunks)] += 1;
    }
    Ok(AllocationPlan {
        counts,
        budget,
        strategy: Strategy::Random,
        alpha: None,
        residual: 0,
    })
}

/// Token counts a rate set permits, ascending.
pub fn valid_counts(rateset: &RateSet) -> Vec<usize> {
    let mut counts: Vec<usize> = rateset.rates().map(|r| rateset.chunk_len() / r).collect();
    counts.sort_unstable();
    counts.dedup();
    counts
}

/// Nearest permitted count; equidistant candidates resolve to the smaller.
fn snap(count: usize, valid: &[usize]) -> usize {
    let mut best = valid[0];
    for &v in valid {
        if v.abs_diff(count) < best.abs_diff(count) {
            best = v;
        }
    }
    best
}

/// Snaps a plan onto permitted counts, then spends leftover budget by
/// doubling chunks in score order.
///
/// 1. Each count moves to its nearest permitted count (ties go down).
/// 2. If snapping overshot the budget, the lowest-scored chunks step down
///    one permitted count at a time until the plan fits.
/// 3. Chunks are visited from highest to lowest score (ties by index); a
///    chunk is doubled when the doubled count is permitted and the increment
///    fits the leftover. A visited chunk is not revisited, so the loop ends
///    after at most one pass.
///
/// The returned plan records any unspent budget in `residual`.
pub fn reallocate(
    plan: &AllocationPlan,
    scores: &ScoreVector,
    budget: Budget,
    rateset: &RateSet,
) -> Result<AllocationPlan> {
    let n = plan.n_chunks();
    if n == 0 {
        return Err(Error::NoChunks);
    }
    if scores.len() != n {
        return Err(Error::LengthMismatch(format!(
            "plan has {n} chunks but {} scores",
            scores.len()
        )));
    }
    let valid = valid_counts(rateset);
    let smallest = valid[0];
    if n.checked_mul(smallest).map_or(true, |t| t > budget.total) {
        return Err(Error::InfeasibleBudget {
            budget: budget.total,
            n_chunks: n,
            per_chunk: smallest,
        });
    }

    let mut counts: Vec<usize> = plan.counts.iter().map(|&c| snap(c, &valid)).collect();
    let ranking = scores.ranking();

    let mut total: usize = counts.iter().sum();
    while total > budget.total {
        let victim = ranking
            .iter()
            .rev()
            .copied()
            .find(|&i| counts[i] > smallest)
            .expect("feasibility guarantees a chunk above the minimum");
        let pos = valid.binary_search(&counts[victim]).expect("count is valid");
        total -= counts[victim] - valid[pos - 1];
        counts[victim] = valid[pos - 1];
    }

    let mut leftover = budget.total - total;
    for &i in &ranking {
        if leftover == 0 {
            break;
        }
        let doubled = counts[i] * 2;
        if counts[i] <= leftover && valid.binary_search(&doubled).is_ok() {
            leftover -= counts[i];
            counts[i] = doubled;
        }
    }

    Ok(AllocationPlan {
        counts,
        budget,
        strategy: plan.strategy,
        alpha: plan.alpha,
        residual: leftover,
    })
}

/// Plan for one strategy, optionally reallocated onto `rateset`.
///
/// Dynamic plans need `scores`. Baselines ignore them and, when reallocated,
/// rank chunks by flat scores (ties by index). Returns the plan together with
/// the scores it was ranked by.
pub fn allocate(
    strategy: Strategy,
    n_chunks: usize,
    scores: Option<&ScoreVector>,
    budget: Budget,
    alpha: f64,
    min_per_chunk: usize,
    rateset: Option<&RateSet>,
    seed: u64,
) -> Result<(AllocationPlan, ScoreVector)> {
    let (plan, scores) = match strategy {
        Strategy::Dynamic => {
            let scores = scores
                .ok_or_else(|| Error::InvalidSignals("dynamic allocation needs chunk scores".into()))?;
            if scores.len() != n_chunks {
                return Err(Error::LengthMismatch(format!(
                    "{} scores for {n_chunks} chunks",
                    scores.len()
                )));
            }
            (dynamic_allocate(scores, budget, min_per_chunk)?, scores.clone())
        }
        Strategy::Uniform | Strategy::Random => {
            let plan = if strategy == Strategy::Uniform {
                uniform_allocate(n_chunks, budget)?
            } else {
                random_allocate(n_chunks, budget, seed)?
            };
            let flat = ScoreVector {
                s: vec![1.0 / n_chunks as f64; n_chunks],
                alpha,
            };
            (plan, flat)
        }
    };
    let plan = match rateset {
        Some(rates) => reallocate(&plan, &scores, budget, rates)?,
        None => plan,
    };
    Ok((plan, scores))
}

/// Median of `values`; the mean of the middle pair for even lengths, zero
/// when empty.
pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    match v.len() % 2 {
        1 => v[mid] as f64,
        _ => (v[mid - 1] + v[mid]) as f64 / 2.0,
    }
}
