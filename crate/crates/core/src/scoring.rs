//! Chunk importance: local perplexity, global attention mass, and their blend.

use crate::error::{Error, Result};

/// Per-chunk local and global importance signals.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSignals {
    /// Summed negative log-likelihood of each chunk's tokens, in nats.
    pub ppl: Vec<f64>,
    /// Attention mass the final query token places on each chunk's
    /// compression tokens.
    pub attn: Vec<f64>,
}

impl ChunkSignals {
    pub fn new(ppl: Vec<f64>, attn: Vec<f64>) -> Result<Self> {
        if ppl.len() != attn.len() {
            return Err(Error::InvalidSignals(format!(
                "ppl has {} entries but attn has {}",
                ppl.len(),
                attn.len()
            )));
        }
        if ppl.is_empty() {
            return Err(Error::InvalidSignals("no chunks".into()));
        }
        for (name, values) in [("ppl", &ppl), ("attn", &attn)] {
            if let Some((i, v)) = values
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                return Err(Error::InvalidSignals(format!(
                    "{name}[{i}] = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(Self { ppl, attn })
    }

    pub fn n_chunks(&self) -> usize {
        self.ppl.len()
    }
}

/// Normalized chunk scores: strictly positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub s: Vec<f64>,
    pub alpha: f64,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Chunk indices ordered by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.s.len()).collect();
        order.sort_by(|&a, &b| self.s[b].total_cmp(&self.s[a]).then(a.cmp(&b)));
        order
    }
}

/// Summed negative log-likelihood of one chunk's ground-truth tokens.
pub fn chunk_ppl(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::EmptyChunk);
    }
    let mut nll = 0.0;
    for (index, &lp) in token_logprobs.iter().enumerate() {
        if !lp.is_finite() || lp > 0.0 {
            return Err(Error::InvalidLogProb { index, value: lp });
        }
        nll -= lp;
    }
    Ok(nll)
}

/// Sums attention weights per owning chunk.
///
/// `ownership[j]` is the chunk that owns key position `j`.
pub fn chunk_attention(weights: &[f64], ownership: &[usize], n_chunks: usize) -> Result<Vec<f64>> {
    if weights.len() != ownership.len() {
        return Err(Error::LengthMismatch(format!(
            "{} attention weights but {} ownership entries",
            weights.len(),
            ownership.len()
        )));
    }
    let mut mass = vec![0.0; n_chunks];
    for (&w, &owner) in weights.iter().zip(ownership) {
        let slot = mass.get_mut(owner).ok_or(Error::ChunkIndexOutOfRange {
            index: owner,
            n_chunks,
        })?;
        *slot += w;
    }
    Ok(mass)
}

/// Numerically stable softmax at temperature one.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidSignals("softmax input must be finite".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Blends global attention and sum-normalized perplexity, then softmaxes:
/// `raw_i = alpha * A_i - (1 - alpha) * P_i / sum(P)`.
///
/// When every `P_i` is zero the perplexity term is taken as `1 / N`.
pub fn combined_scores(signals: &ChunkSignals, alpha: f64) -> Result<ScoreVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let checked = ChunkSignals::new(signals.ppl.clone(), signals.attn.clone())?;
    let n = checked.n_chunks();
    let ppl_sum: f64 = checked.ppl.iter().sum();
    let raw: Vec<f64> = checked
        .attn
        .iter()
        .zip(&checked.ppl)
        .map(|(&a, &p)| {
            let local = if ppl_sum > 0.0 { p / ppl_sum } else { 1.0 / n as f64 };
            a * alpha - local * (1.0 - alpha)
        })
        .collect();
    Ok(ScoreVector {
        s: softmax(&raw)?,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    fn argmin(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x < v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn ppl_examples() {
        assert_eq!(chunk_ppl(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((chunk_ppl(&[-0.693147, -1.386294]).unwrap() - 2.079441).abs() < 1e-9);
        assert_eq!(chunk_ppl(&[-2.0]).unwrap(), 2.0);
    }

    #[test]
    fn ppl_errors() {
        assert_eq!(chunk_ppl(&[]).unwrap_err().to_string(), "empty chunk");
        assert!(chunk_ppl(&[-1.0, 0.5])
            .unwrap_err()
            .to_string()
            .starts_with("invalid log-probability"));
        assert!(chunk_ppl(&[f64::NAN]).is_err());
    }

    #[test]
    fn attention_examples() {
        let a = chunk_attention(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1], 2).unwrap();
        assert!(close(&a, &[0.3, 0.7], 1e-12));
        assert!(close(
            &chunk_attention(&[0.25, 0.75], &[0, 0], 1).unwrap(),
            &[1.0],
            1e-12
        ));
        assert_eq!(
            chunk_attention(&[0.0, 0.0], &[0, 1], 2).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(chunk_attention(&[], &[], 3).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn attention_rejects_bad_ownership() {
        assert!(matches!(
            chunk_attention(&[0.5, 0.5], &[0, 2], 2),
            Err(Error::ChunkIndexOutOfRange { index: 2, .. })
        ));
        assert!(chunk_attention(&[0.5], &[0, 0], 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-15));
        assert!(close(
            &softmax(&[2f64.ln(), 0.0]).unwrap(),
            &[2.0 / 3.0, 1.0 / 3.0],
            1e-12
        ));
        assert!(close(&softmax(&[1000.0, 1000.0]).unwrap(), &[0.5, 0.5], 1e-15));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn combined_examples() {
        let sym = ChunkSignals::new(vec![2.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert!(close(&combined_scores(&sym, 0.5).unwrap().s, &[0.5, 0.5], 1e-12));

        // raw = [-0.125, 0.125]; softmax by hand: 1 / (1 + e^{0.25}).
        let hand = 1.0 / (1.0 + 0.25f64.exp());
        let skew = ChunkSignals::new(vec![3.0, 1.0], vec![0.5, 0.5]).unwrap();
        let s = combined_scores(&skew, 0.5).unwrap();
        assert!(close(&s.s, &[hand, 1.0 - hand], 1e-12));
        assert!(close(&s.s, &[0.43782, 0.56218], 1e-5));

        let attn_only = ChunkSignals::new(vec![0.1, 9.0], vec![0.2, 0.8]).unwrap();
        assert_eq!(argmax(&combined_scores(&attn_only, 1.0).unwrap().s), 1);
    }

    #[test]
    fn all_zero_ppl_is_uniform_penalty() {
        let sig = ChunkSignals::new(vec![0.0, 0.0, 0.0], vec![0.1, 0.6, 0.3]).unwrap();
        let s = combined_scores(&sig, 0.0).unwrap();
        assert!(close(&s.s, &[1.0 / 3.0; 3], 1e-12));
    }

    #[test]
    fn combined_errors() {
        let sig = ChunkSignals::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(combined_scores(&sig, 1.5), Err(Error::InvalidAlpha(_))));
        assert!(matches!(combined_scores(&sig, -0.1), Err(Error::InvalidAlpha(_))));
        let bad = ChunkSignals {
            ppl: vec![f64::INFINITY],
            attn: vec![0.0],
        };
        assert!(combined_scores(&bad, 0.5).is_err());
        assert!(ChunkSignals::new(vec![1.0], vec![]).is_err());
        assert!(ChunkSignals::new(vec![-1.0], vec![0.0]).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let s = ScoreVector {
            s: vec![0.25, 0.5, 0.25],
            alpha: 0.5,
        };
        assert_eq!(s.ranking(), vec![1, 0, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn signals() -> impl Strategy<Value = ChunkSignals> {
            (1usize..24).prop_flat_map(|n| {
                (
                    prop::collection::vec(0.0f64..50.0, n),
                    prop::collection::vec(0.0f64..1.0, n),
                )
                    .prop_map(|(ppl, attn)| ChunkSignals { ppl, attn })
            })
        }

        proptest! {
            #[test]
            fn sums_to_one_and_positive(sig in signals(), alpha in 0.0f64..=1.0) {
                let s = combined_scores(&sig, alpha).unwrap();
                let total: f64 = s.s.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(s.s.iter().all(|&x| x > 0.0));
            }

            #[test]
            fn attention_monotone(sig in signals(), alpha in 0.01f64..=1.0, i in 0usize..24, bump in 0.0f64..2.0) {
                let i = i % sig.n_chunks();
                let before = combined_scores(&sig, alpha).unwrap().s[i];
                let mut up = sig.clone();
                up.attn[i] += bump;
                let after = combined_scores(&up, alpha).unwrap().s[i];
                prop_assert!(after >= before - 1e-15);
            }

            #[test]
            fn ppl_monotone(sig in signals(), alpha in 0.0f64..0.99, i in 0usize..24, bump in 0.0f64..20.0) {
                let i = i % sig.n_chunks();
                let before = combined_scores(&sig, alpha).unwrap().s[i];
                let mut up = sig.clone();
                up.ppl[i] += bump;
                let after = combined_scores(&up, alpha).unwrap().s[i];
                prop_assert!(after <= before + 1e-15);
            }

            #[test]
            fn ppl_scale_invariant(sig in signals(), alpha in 0.0f64..=1.0, c in 0.01f64..100.0) {
                let a = combined_scores(&sig, alpha).unwrap();
                let scaled = ChunkSignals { ppl: sig.ppl.iter().map(|p| p * c).collect(), attn: sig.attn.clone() };
                let b = combined_scores(&scaled, alpha).unwrap();
                prop_assert!(close(&a.s, &b.s, 1e-12));
            }

            #[test]
            fn boundary_argmax(sig in signals()) {
                prop_assert_eq!(argmax(&combined_scores(&sig, 1.0).unwrap().s), argmax(&sig.attn));
                if sig.ppl.iter().sum::<f64>() > 0.0 {
                    prop_assert_eq!(argmax(&combined_scores(&sig, 0.0).unwrap().s), argmin(&sig.ppl));
                }
            }
        }
    }
}
