use proptest::prelude::*;

use super::*;
use crate::domain::segment_into_chunks;
use crate::Strategy;

fn tiny_config(seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_positions: 64,
        n_ct_embeddings: 4,
        seed,
        ..ToyModelConfig::default()
    }
}

fn chunks_of(text: &[u8], len: usize) -> Vec<Chunk> {
    let toks: Vec<TokenId> = text.iter().map(|&b| b as TokenId).collect();
    segment_into_chunks(&toks, len).unwrap()
}

fn plan(counts: Vec<usize>) -> AllocationPlan {
    let total = counts.iter().sum();
    AllocationPlan {
        counts,
        budget: crate::Budget::new(total),
        strategy: Strategy::Uniform,
        alpha: None,
        residual: 0,
    }
}

#[test]
fn zero_head_predicts_uniform() {
    let mut model = ToyModel::new(tiny_config(1)).unwrap();
    model.zero_head();
    let chunks = chunks_of(b"the cat sat on the mat", 8);
    let lp = model.chunk_logprobs(&chunks, &plan(vec![2, 2, 2]), 1).unwrap();
    let expected = -(MIN_VOCAB as f64).ln();
    assert_eq!(lp.len(), 8);
    for x in lp {
        assert!((x - expected).abs() < 1e-12);
    }
}

#[test]
fn zero_head_loss_is_log_vocab() {
    let mut model = ToyModel::new(tiny_config(2)).unwrap();
    model.zero_head();
    let ex = TrainingExample {
        document: b"abcdefgh".iter().map(|&b| b as u32).collect(),
        questions: vec![Question {
            query: vec![b'q' as u32],
            answer: vec![b'x' as u32, b'y' as u32],
        }],
    };
    let seq = example_sequence(&ex, 4, &[1, 3], 0.25).unwrap();
    let loss = model.loss(&[seq]).unwrap();
    assert!((loss - (MIN_VOCAB as f64).ln()).abs() < 1e-12);
}

#[test]
fn attention_maps_respect_the_mask() {
    let model = ToyModel::new(tiny_config(3)).unwrap();
    let chunks = chunks_of(b"abcdefghijk", 4);
    let seq = EncodedSequence::new(&chunks, &[2, 1, 3], Some(&[b'z' as u32])).unwrap();
    let mask = build_compression_mask(&seq.input.layout);
    let out = model.forward(&seq.input).unwrap();
    let n = seq.input.tokens.len();
    for layer in &out.attention {
        for head in layer {
            for q in 0..n {
                let mut total = 0.0;
                for k in 0..n {
                    let a = head[[q, k]];
                    if !mask.allowed(q, k) {
                        assert_eq!(a, 0.0, "q={q} k={k}");
                    } else {
                        assert!(a > 0.0);
                    }
                    total += a;
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn masked_tokens_do_not_influence_outputs() {
    // Changing an earlier chunk's raw tokens must not move a later chunk's
    // logits, because later chunks only see compression tokens... except
    // through those compression tokens. Changing a later chunk must not move
    // an earlier one at all.
    let model = ToyModel::new(tiny_config(4)).unwrap();
    let a = chunks_of(b"aaaabbbbcccc", 4);
    let b = chunks_of(b"aaaabbbbxyzw", 4);
    let counts = [1, 2, 2];
    let sa = EncodedSequence::new(&a, &counts, None).unwrap();
    let sb = EncodedSequence::new(&b, &counts, None).unwrap();
    let la = model.forward(&sa.input).unwrap().logits;
    let lb = model.forward(&sb.input).unwrap().logits;
    let end = sa.chunk_starts[2];
    for t in 0..end {
        for v in 0..MIN_VOCAB {
            assert_eq!(la[[t, v]], lb[[t, v]]);
        }
    }
}

#[test]
fn incremental_compression_matches_full_pass() {
    let model = ToyModel::new(tiny_config(5)).unwrap();
    let chunks = chunks_of(b"the quick brown fox jumps over", 7);
    for counts in [vec![1, 1, 1, 1, 1], vec![3, 1, 5, 2, 4], vec![6, 6, 1, 2, 1]] {
        let p = plan(counts);
        let inc = model.compress_sequence(&chunks, &p).unwrap();
        let full = model.compress_full_pass(&chunks, &p).unwrap();
        assert_eq!(inc.dim(), full.dim());
        let max = inc
            .iter()
            .zip(full.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-9, "max deviation {max}");
    }
}

#[test]
fn compression_rejects_zero_counts() {
    let model = ToyModel::new(tiny_config(5)).unwrap();
    let chunks = chunks_of(b"abcdefgh", 4);
    assert!(matches!(
        model.compress_sequence(&chunks, &plan(vec![1, 0])),
        Err(Error::ZeroCountChunk(1))
    ));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (model, batch) = gradcheck_fixture(7).unwrap();
    let report = gradient_check(&model, &batch, 240, 1e-5, 11).unwrap();
    assert_eq!(report.entries.len(), 240);
    let covered: std::collections::BTreeSet<_> = report.entries.iter().map(|e| e.tensor.as_str()).collect();
    assert_eq!(covered.len(), model.tensor_specs().len());
    let worst = report.worst().unwrap();
    assert!(report.max_rel_error < 1e-4, "worst {worst:?}");
}

#[test]
fn small_gradient_step_decreases_loss() {
    let (model, batch) = gradcheck_fixture(8).unwrap();
    let (loss, grad) = model.loss_and_gradients(&batch).unwrap();
    let mut stepped = model.clone();
    for (p, g) in stepped.params_mut().iter_mut().zip(&grad) {
        *p -= 1e-3 * g;
    }
    assert!(stepped.loss(&batch).unwrap() < loss);
}

fn toy_corpus() -> Vec<TrainingExample> {
    (0..4u32)
        .map(|i| TrainingExample {
            document: (0..16).map(|j| b'a' as u32 + (i + j) % 7).collect(),
            questions: vec![Question {
                query: vec![b'0' as u32 + i],
                answer: vec![b'a' as u32 + i],
            }],
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_zero_steps_is_identity() {
    let model = ToyModel::new(tiny_config(9)).unwrap();
    let opts = TrainOptions {
        steps: 6,
        batch_size: 2,
        chunk_len: 8,
        max_ct: 3,
        ..TrainOptions::default()
    };
    let (a, la) = train(&model, &toy_corpus(), &opts).unwrap();
    let (b, lb) = train(&model, &toy_corpus(), &opts).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert_ne!(a, model);
    let (same, empty) = train(&model, &toy_corpus(), &TrainOptions { steps: 0, ..opts }).unwrap();
    assert!(empty.is_empty());
    assert_eq!(same, model);
}

#[test]
fn training_reduces_loss() {
    let model = ToyModel::new(tiny_config(10)).unwrap();
    let opts = TrainOptions {
        steps: 60,
        batch_size: 4,
        chunk_len: 8,
        max_ct: 3,
        step_size: 1e-2,
        ..TrainOptions::default()
    };
    let (_, losses) = train(&model, &toy_corpus(), &opts).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = ToyModel::new(tiny_config(12)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert_eq!(&buf[..8], &CHECKPOINT_MAGIC);
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.config(), model.config());
    assert!(back
        .params()
        .iter()
        .zip(model.params())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), model);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = ToyModel::new(tiny_config(13)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let mut bad_magic = buf.clone();
    bad_magic[0] ^= 1;
    assert!(matches!(read_checkpoint(bad_magic.as_slice()), Err(Error::Checkpoint(_))));
    let truncated = &buf[..buf.len() - 3];
    assert!(matches!(read_checkpoint(truncated), Err(Error::Checkpoint(_))));
    let mut extra = buf.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint(extra.as_slice()), Err(Error::Checkpoint(_))));
}

#[test]
fn ct_attention_is_a_distribution_over_ct_keys() {
    let model = ToyModel::new(tiny_config(14)).unwrap();
    let chunks = chunks_of(b"abcdefghijkl", 4);
    let seq = EncodedSequence::new(&chunks, &[2, 3, 1], Some(&[b'?' as u32])).unwrap();
    let (lp, attn) = model.analyze(&seq).unwrap();
    assert_eq!(lp.len(), 3);
    assert_eq!(attn.weights.len(), 6);
    assert_eq!(attn.ownership, vec![0, 0, 1, 1, 1, 2]);
    assert!((attn.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(attn.weights.iter().all(|&w| w > 0.0));
}

#[test]
fn input_validation() {
    let model = ToyModel::new(tiny_config(15)).unwrap();
    let long = chunks_of(&[b'a'; 70], 70);
    assert!(matches!(
        model.chunk_logprobs(&long, &plan(vec![1]), 0),
        Err(Error::SequenceTooLong { .. })
    ));
    let chunks = chunks_of(b"abcd", 4);
    assert!(matches!(
        model.chunk_logprobs(&chunks, &plan(vec![1]), 1),
        Err(Error::ChunkIndexOutOfRange { .. })
    ));
    assert!(ToyModel::new(ToyModelConfig { n_heads: 5, ..tiny_config(0) }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logprobs_are_nonpositive_and_finite(seed in 0u64..1000, counts in prop::collection::vec(1usize..4, 3)) {
        let model = ToyModel::new(tiny_config(seed)).unwrap();
        let chunks = chunks_of(b"hello world again", 6);
        let seq = EncodedSequence::new(&chunks, &counts, None).unwrap();
        for lp in model.all_chunk_logprobs(&seq).unwrap() {
            prop_assert!(lp.iter().all(|x| x.is_finite() && *x <= 0.0));
        }
    }
}
