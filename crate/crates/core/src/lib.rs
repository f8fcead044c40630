//! Dynamic allocation of compression ("soft") tokens across context chunks.
//!
//! A long context is split into fixed-length chunks, each of which is later
//! condensed into a handful of compression tokens. Instead of giving every
//! chunk the same share of the token budget, chunks are scored by a blend of
//! local perplexity and the attention the query pays to their compressed
//! representation, and the budget is apportioned by those scores.
//!
//! The crate also ships a small decoder-only transformer with interleaved
//! compression tokens ([`toymodel`]) that produces real signals, and a
//! synthetic needle-retrieval bench ([`bench`]) that exercises the whole
//! pipeline.

pub mod allocator;
pub mod bench;
pub mod domain;
pub mod error;
pub mod scoring;
pub mod signals_io;
pub mod toymodel;

pub use allocator::{
    allocate, dynamic_allocate, random_allocate, reallocate, uniform_allocate, valid_counts,
};
pub use domain::{segment_into_chunks, AllocationPlan, Budget, Chunk, RateSet, Strategy, TokenId};
pub use error::{Error, Result};
pub use scoring::{chunk_attention, chunk_ppl, combined_scores, softmax, ChunkSignals, ScoreVector};
