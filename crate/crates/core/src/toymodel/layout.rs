//! Sequence layouts with interleaved compression tokens and their
//! visibility mask.
//!
//! A document of `N` chunks becomes `raw_0, ct_0, raw_1, ct_1, ...`. A query
//! is appended as one more raw segment with no compression tokens after it,
//! so it sees every chunk only through that chunk's compression tokens.

use crate::domain::{Chunk, TokenId};
use crate::error::{Error, Result};

use super::{CHUNK_START, CT_TOKEN, QUERY_START};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Raw,
    Ct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub chunk: usize,
    pub len: usize,
}

/// Where one position sits inside its layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionInfo {
    pub kind: SegmentKind,
    pub chunk: usize,
    /// Offset within the position's segment.
    pub offset: usize,
}

/// Ordered raw/ct segments, one raw segment per chunk optionally followed by
/// that chunk's compression tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    segments: Vec<Segment>,
    total_len: usize,
}

impl SequenceLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidLayout("no segments".into()));
        }
        let mut expected_chunk = 0;
        let mut prev: Option<Segment> = None;
        for seg in &segments {
            if seg.len == 0 {
                return Err(Error::InvalidLayout(format!(
                    "zero-length {:?} segment for chunk {}",
                    seg.kind, seg.chunk
                )));
            }
            match seg.kind {
                SegmentKind::Raw => {
                    if seg.chunk != expected_chunk {
                        return Err(Error::InvalidLayout(format!(
                            "raw segment for chunk {} where chunk {expected_chunk} was expected",
                            seg.chunk
                        )));
                    }
                    expected_chunk += 1;
                }
                SegmentKind::Ct => {
                    let follows_own_raw = matches!(
                        prev,
                        Some(Segment { kind: SegmentKind::Raw, chunk, .. }) if chunk == seg.chunk
                    );
                    if !follows_own_raw {
                        return Err(Error::InvalidLayout(format!(
                            "ct segment for chunk {} does not follow that chunk's raw segment",
                            seg.chunk
                        )));
                    }
                }
            }
            prev = Some(*seg);
        }
        let total_len = segments.iter().map(|s| s.len).sum();
        Ok(Self {
            segments,
            total_len,
        })
    }

    /// Layout for chunks of `raw_lens` each followed by `ct_counts` compression
    /// tokens (omitted when zero), then the `trailing` raw segments (queries),
    /// which carry no compression tokens.
    pub fn from_counts(raw_lens: &[usize], ct_counts: &[usize], trailing: &[usize]) -> Result<Self> {
        if raw_lens.len() != ct_counts.len() {
            return Err(Error::LengthMismatch(format!(
                "{} raw segments but {} ct counts",
                raw_lens.len(),
                ct_counts.len()
            )));
        }
        let mut segments = Vec::with_capacity(2 * raw_lens.len() + 1);
        for (chunk, (&raw, &ct)) in raw_lens.iter().zip(ct_counts).enumerate() {
            segments.push(Segment {
                kind: SegmentKind::Raw,
                chunk,
                len: raw,
            });
            if ct > 0 {
                segments.push(Segment {
                    kind: SegmentKind::Ct,
                    chunk,
                    len: ct,
                });
            }
        }
        for (k, &len) in trailing.iter().enumerate() {
            segments.push(Segment {
                kind: SegmentKind::Raw,
                chunk: raw_lens.len() + k,
                len,
            });
        }
        Self::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn positions(&self) -> Vec<PositionInfo> {
        let mut out = Vec::with_capacity(self.total_len);
        for seg in &self.segments {
            out.extend((0..seg.len).map(|offset| PositionInfo {
                kind: seg.kind,
                chunk: seg.chunk,
                offset,
            }));
        }
        out
    }
}

/// Square boolean visibility matrix; entry `(query, key)` is true when the
/// query position may attend to the key position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    /// Visible key positions of one query row, ascending.
    pub fn row_keys(&self, query: usize) -> Vec<usize> {
        let row = &self.allowed[query * self.size..(query + 1) * self.size];
        row.iter()
            .enumerate()
            .filter_map(|(k, &a)| a.then_some(k))
            .collect()
    }
}

/// Raw tokens see their own chunk causally plus the compression tokens of
/// earlier chunks. Compression tokens additionally see their whole chunk and
/// earlier compression tokens of the same chunk. Nothing attends forward.
pub fn build_compression_mask(layout: &SequenceLayout) -> AttentionMask {
    let info = layout.positions();
    let n = info.len();
    let mut allowed = vec![false; n * n];
    for (q, qi) in info.iter().enumerate() {
        for (k, ki) in info.iter().enumerate().take(q + 1) {
            let visible = match (qi.kind, ki.kind) {
                (_, SegmentKind::Ct) if ki.chunk < qi.chunk => true,
                (_, SegmentKind::Raw) => ki.chunk == qi.chunk,
                (SegmentKind::Ct, SegmentKind::Ct) => ki.chunk == qi.chunk,
                (SegmentKind::Raw, SegmentKind::Ct) => false,
            };
            allowed[q * n + k] = visible;
        }
    }
    AttentionMask { size: n, allowed }
}

/// Token ids plus layout for one model pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub layout: SequenceLayout,
    /// One id per position; compression-token positions hold [`CT_TOKEN`].
    pub tokens: Vec<TokenId>,
}

/// A document (and optional query) laid out for the model, with the
/// bookkeeping needed to read per-chunk results back out.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub input: ModelInput,
    /// Position of each chunk's start marker; its chunk tokens follow.
    pub chunk_starts: Vec<usize>,
    pub chunk_lens: Vec<usize>,
    /// Compression-token positions, ascending.
    pub ct_positions: Vec<usize>,
    /// Owning chunk of each entry in `ct_positions`.
    pub ct_owner: Vec<usize>,
    /// Position of each query's start marker.
    pub query_starts: Vec<usize>,
}

impl EncodedSequence {
    /// Lays out `chunks` with `counts[i]` compression tokens after chunk `i`.
    ///
    /// Each raw segment is the chunk prefixed by [`CHUNK_START`], so the
    /// marker's output predicts the chunk's first token. The query segment is
    /// [`QUERY_START`] followed by `query`.
    pub fn new(chunks: &[Chunk], counts: &[usize], query: Option<&[TokenId]>) -> Result<Self> {
        Self::with_queries(chunks, counts, query.as_slice())
    }

    /// Like [`EncodedSequence::new`] with several query segments in a row.
    /// Each one sees every compression token but none of the other queries.
    pub fn with_queries(chunks: &[Chunk], counts: &[usize], queries: &[&[TokenId]]) -> Result<Self> {
        if chunks.is_empty() {
            return Err(Error::EmptyInput);
        }
        if chunks.len() != counts.len() {
            return Err(Error::LengthMismatch(format!(
                "{} chunks but {} counts",
                chunks.len(),
                counts.len()
            )));
        }
        let raw_lens: Vec<usize> = chunks.iter().map(|c| c.len() + 1).collect();
        if chunks.iter().any(Chunk::is_empty) {
            return Err(Error::EmptyChunk);
        }
        let query_lens: Vec<usize> = queries.iter().map(|q| q.len() + 1).collect();
        let layout = SequenceLayout::from_counts(&raw_lens, counts, &query_lens)?;

        let mut tokens = Vec::with_capacity(layout.total_len());
        let mut chunk_starts = Vec::with_capacity(chunks.len());
        let mut ct_positions = Vec::new();
        let mut ct_owner = Vec::new();
        for (i, (chunk, &count)) in chunks.iter().zip(counts).enumerate() {
            chunk_starts.push(tokens.len());
            tokens.push(CHUNK_START);
            tokens.extend_from_slice(&chunk.tokens);
            for _ in 0..count {
                ct_positions.push(tokens.len());
                ct_owner.push(i);
                tokens.push(CT_TOKEN);
            }
        }
        let mut query_starts = Vec::with_capacity(queries.len());
        for q in queries {
            query_starts.push(tokens.len());
            tokens.push(QUERY_START);
            tokens.extend_from_slice(q);
        }
        Ok(Self {
            input: ModelInput { layout, tokens },
            chunk_starts,
            chunk_lens: chunks.iter().map(Chunk::len).collect(),
            ct_positions,
            ct_owner,
            query_starts,
        })
    }

    pub fn n_chunks(&self) -> usize {
        self.chunk_starts.len()
    }

    /// `(predicting position, target token)` for every token of chunk `i`.
    pub fn chunk_targets(&self, i: usize) -> Vec<(usize, TokenId)> {
        let start = self.chunk_starts[i];
        (0..self.chunk_lens[i])
            .map(|l| (start + l, self.input.tokens[start + 1 + l]))
            .collect()
    }

    /// Start of the final query, if any.
    pub fn query_start(&self) -> Option<usize> {
        self.query_starts.last().copied()
    }

    pub fn last_position(&self) -> usize {
        self.input.tokens.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed_sets(mask: &AttentionMask) -> Vec<Vec<usize>> {
        (0..mask.size()).map(|q| mask.row_keys(q)).collect()
    }

    #[test]
    fn single_raw_chunk_is_causal() {
        let layout = SequenceLayout::from_counts(&[4], &[0], &[]).unwrap();
        let mask = build_compression_mask(&layout);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(mask.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn two_chunk_hand_layout() {
        let layout = SequenceLayout::from_counts(&[2, 2], &[1, 1], &[]).unwrap();
        let mask = build_compression_mask(&layout);
        assert_eq!(
            allowed_sets(&mask),
            vec![
                vec![0],
                vec![0, 1],
                vec![0, 1, 2],
                vec![2, 3],
                vec![2, 3, 4],
                vec![2, 3, 4, 5],
            ]
        );
    }

    #[test]
    fn trailing_query_sees_only_compression_tokens() {
        let layout = SequenceLayout::from_counts(&[2, 2], &[1, 2], &[2]).unwrap();
        let mask = build_compression_mask(&layout);
        // ct positions: 2, 5, 6; query at 7, 8
        assert_eq!(mask.row_keys(7), vec![2, 5, 6, 7]);
        assert_eq!(mask.row_keys(8), vec![2, 5, 6, 7, 8]);
    }

    #[test]
    fn layout_validation() {
        let raw = |chunk, len| Segment { kind: SegmentKind::Raw, chunk, len };
        let ct = |chunk, len| Segment { kind: SegmentKind::Ct, chunk, len };
        assert!(SequenceLayout::new(vec![raw(0, 2), ct(0, 1), raw(1, 1)]).is_ok());
        assert!(SequenceLayout::new(vec![]).is_err());
        assert!(SequenceLayout::new(vec![ct(0, 1)]).is_err());
        assert!(SequenceLayout::new(vec![raw(1, 2)]).is_err());
        assert!(SequenceLayout::new(vec![raw(0, 2), ct(1, 1)]).is_err());
        assert!(SequenceLayout::new(vec![raw(0, 0)]).is_err());
        assert!(SequenceLayout::new(vec![raw(0, 2), ct(0, 1), ct(0, 1)]).is_err());
    }

    #[test]
    fn encoded_sequence_bookkeeping() {
        let chunks = vec![
            Chunk { index: 0, tokens: vec![10, 11, 12] },
            Chunk { index: 1, tokens: vec![13] },
        ];
        let enc = EncodedSequence::new(&chunks, &[2, 1], Some(&[20, 21])).unwrap();
        assert_eq!(
            enc.input.tokens,
            vec![CHUNK_START, 10, 11, 12, CT_TOKEN, CT_TOKEN, CHUNK_START, 13, CT_TOKEN, QUERY_START, 20, 21]
        );
        assert_eq!(enc.chunk_starts, vec![0, 6]);
        assert_eq!(enc.ct_positions, vec![4, 5, 8]);
        assert_eq!(enc.ct_owner, vec![0, 0, 1]);
        assert_eq!(enc.query_start(), Some(9));
        assert_eq!(enc.chunk_targets(0), vec![(0, 10), (1, 11), (2, 12)]);
        assert_eq!(enc.chunk_targets(1), vec![(6, 13)]);
        assert_eq!(enc.input.layout.total_len(), enc.input.tokens.len());
    }

    #[test]
    fn several_queries_see_compression_tokens_only() {
        let chunks = vec![Chunk { index: 0, tokens: vec![10, 11] }];
        let enc = EncodedSequence::with_queries(&chunks, &[1], &[&[20], &[21, 22]]).unwrap();
        assert_eq!(enc.query_starts, vec![4, 6]);
        let mask = build_compression_mask(&enc.input.layout);
        assert_eq!(mask.row_keys(5), vec![3, 4, 5]);
        assert_eq!(mask.row_keys(8), vec![3, 6, 7, 8]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mask_is_causal_and_isolates_raw_chunks(
                raw in prop::collection::vec(1usize..5, 1..6),
                ct in prop::collection::vec(0usize..5, 6),
                queries in prop::collection::vec(1usize..4, 0..3),
            ) {
                let ct = &ct[..raw.len()];
                let layout = SequenceLayout::from_counts(&raw, ct, &queries).unwrap();
                let mask = build_compression_mask(&layout);
                let info = layout.positions();
                for q in 0..mask.size() {
                    prop_assert!(mask.allowed(q, q));
                    for k in 0..mask.size() {
                        if k > q {
                            prop_assert!(!mask.allowed(q, k));
                        }
                        if info[k].kind == SegmentKind::Raw && info[k].chunk < info[q].chunk {
                            prop_assert!(!mask.allowed(q, k));
                        }
                    }
                }
            }
        }
    }
}
