//! Domain types shared by scoring, allocation, the toy model and the bench.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids are abstract; the toy model uses bytes plus a few specials.
pub type TokenId = u32;

/// A contiguous run of tokens from one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub index: usize,
    pub tokens: Vec<TokenId>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits `tokens` into chunks of `chunk_len`, the last one possibly shorter.
pub fn segment_into_chunks(tokens: &[TokenId], chunk_len: usize) -> Result<Vec<Chunk>> {
    if chunk_len == 0 {
        return Err(Error::InvalidChunkLength(chunk_len));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(tokens
        .chunks(chunk_len)
        .enumerate()
        .map(|(index, window)| Chunk {
            index,
            tokens: window.to_vec(),
        })
        .collect())
}

/// Total number of compression tokens available to one context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Budget {
    pub total: usize,
}

impl Budget {
    pub const fn new(total: usize) -> Self {
        Self { total }
    }
}

/// Permitted compression rates for chunks of nominal length `chunk_len`.
///
/// A rate `r` condenses a chunk into `chunk_len / r` compression tokens, so
/// every rate must divide the chunk length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateSet {
    rates: BTreeSet<usize>,
    chunk_len: usize,
}

impl RateSet {
    pub fn new(rates: impl IntoIterator<Item = usize>, chunk_len: usize) -> Result<Self> {
        if chunk_len == 0 {
            return Err(Error::InvalidChunkLength(chunk_len));
        }
        let rates: BTreeSet<usize> = rates.into_iter().collect();
        if rates.is_empty() {
            return Err(Error::InvalidRateSet("no rates given".into()));
        }
        for &r in &rates {
            if r == 0 {
                return Err(Error::InvalidRateSet("rate 0 is not allowed".into()));
            }
            if chunk_len % r != 0 {
                return Err(Error::InvalidRateSet(format!(
                    "rate {r} does not divide chunk length {chunk_len}"
                )));
            }
        }
        Ok(Self { rates, chunk_len })
    }

    pub fn rates(&self) -> impl Iterator<Item = usize> + '_ {
        self.rates.iter().copied()
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }
}

/// How an [`AllocationPlan`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dynamic,
    Uniform,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Dynamic, Strategy::Uniform, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Dynamic => "dynamic",
            Strategy::Uniform => "uniform",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(Strategy::Dynamic),
            "uniform" => Ok(Strategy::Uniform),
            "random" => Ok(Strategy::Random),
            other => Err(format!(
                "unknown strategy `{other}` (expected dynamic, uniform or random)"
            )),
        }
    }
}

/// Per-chunk compression-token counts for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub counts: Vec<usize>,
    pub budget: Budget,
    pub strategy: Strategy,
    /// Blend weight, present for dynamic plans.
    pub alpha: Option<f64>,
    /// Budget left unspent by reallocation; zero for plans that were not
    /// reallocated.
    pub residual: usize,
}

impl AllocationPlan {
    pub fn n_chunks(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lens(chunks: &[Chunk]) -> Vec<usize> {
        chunks.iter().map(Chunk::len).collect()
    }

    #[test]
    fn segments_with_short_tail() {
        let tokens: Vec<TokenId> = (0..10).collect();
        let chunks = segment_into_chunks(&tokens, 4).unwrap();
        assert_eq!(lens(&chunks), vec![4, 4, 2]);
        assert_eq!(
            chunks.iter().map(|c| c.index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn exact_fit_and_single_short_chunk() {
        let four: Vec<TokenId> = (0..4).collect();
        assert_eq!(lens(&segment_into_chunks(&four, 4).unwrap()), vec![4]);
        let three: Vec<TokenId> = (0..3).collect();
        assert_eq!(lens(&segment_into_chunks(&three, 8).unwrap()), vec![3]);
    }

    #[test]
    fn segment_errors() {
        assert_eq!(
            segment_into_chunks(&[], 4).unwrap_err().to_string(),
            "empty input"
        );
        assert!(segment_into_chunks(&[1, 2], 0)
            .unwrap_err()
            .to_string()
            .starts_with("invalid chunk length"));
    }

    #[test]
    fn rate_set_validation() {
        assert!(RateSet::new([2, 4, 8, 16, 32], 32).is_ok());
        assert!(RateSet::new([3], 32).is_err());
        assert!(RateSet::new([0], 32).is_err());
        assert!(RateSet::new(Vec::<usize>::new(), 32).is_err());
        assert!(RateSet::new([1], 0).is_err());
    }

    #[test]
    fn strategy_parses() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flatten_round_trips(tokens in prop::collection::vec(0u32..300, 1..200), l in 1usize..40) {
                let chunks = segment_into_chunks(&tokens, l).unwrap();
                let flat: Vec<TokenId> = chunks.iter().flat_map(|c| c.tokens.iter().copied()).collect();
                prop_assert_eq!(&flat, &tokens);
                prop_assert_eq!(chunks.len(), tokens.len().div_ceil(l));
                let (last, head) = chunks.split_last().unwrap();
                prop_assert!(head.iter().all(|c| c.len() == l));
                prop_assert!(last.len() >= 1 && last.len() <= l);
            }
        }
    }
}
