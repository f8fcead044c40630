use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::MIN_VOCAB;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub n_ct_embeddings: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: MIN_VOCAB,
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            d_ff: 96,
            max_positions: 512,
            n_ct_embeddings: 16,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
            ("n_ct_embeddings", self.n_ct_embeddings),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} cannot hold bytes plus special tokens ({MIN_VOCAB})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIndex {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct ParamIndex {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub ct_emb: usize,
    pub layers: Vec<LayerIndex>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub specs: Vec<TensorSpec>,
    pub len: usize,
}

impl ParamIndex {
    pub fn new(cfg: &ToyModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut cursor = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            specs.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset
        };
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let tok_emb = add("tok_emb".into(), vec![v, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_positions, d]);
        let ct_emb = add("ct_emb".into(), vec![cfg.n_ct_embeddings, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerIndex {
                ln1_gain: add(format!("layers.{l}.ln1.gain"), vec![d]),
                ln1_bias: add(format!("layers.{l}.ln1.bias"), vec![d]),
                wq: add(format!("layers.{l}.attn.wq"), vec![d, d]),
                wk: add(format!("layers.{l}.attn.wk"), vec![d, d]),
                wv: add(format!("layers.{l}.attn.wv"), vec![d, d]),
                wo: add(format!("layers.{l}.attn.wo"), vec![d, d]),
                ln2_gain: add(format!("layers.{l}.ln2.gain"), vec![d]),
                ln2_bias: add(format!("layers.{l}.ln2.bias"), vec![d]),
                w1: add(format!("layers.{l}.ffn.w1"), vec![d, f]),
                b1: add(format!("layers.{l}.ffn.b1"), vec![f]),
                w2: add(format!("layers.{l}.ffn.w2"), vec![f, d]),
                b2: add(format!("layers.{l}.ffn.b2"), vec![d]),
            })
            .collect();
        let lnf_gain = add("ln_f.gain".into(), vec![d]);
        let lnf_bias = add("ln_f.bias".into(), vec![d]);
        let head_w = add("head.w".into(), vec![d, v]);
        let head_b = add("head.b".into(), vec![v]);
        Self {
            tok_emb,
            pos_emb,
            ct_emb,
            layers,
            lnf_gain,
            lnf_bias,
            head_w,
            head_b,
            specs,
            len: cursor,
        }
    }
}

pub(crate) fn view2(p: &[f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[offset..offset + rows * cols]).expect("tensor shape")
}

pub(crate) fn view1(p: &[f64], offset: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[offset..offset + len])
}

pub(crate) fn view2_mut(
    p: &mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[offset..offset + rows * cols])
        .expect("tensor shape")
}

pub(crate) fn view1_mut(p: &mut [f64], offset: usize, len: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[offset..offset + len])
}

/// Deterministic initialization from `cfg.seed`.
pub(crate) fn init_params(cfg: &ToyModelConfig, index: &ParamIndex) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = vec![0.0; index.len];
    let d = cfg.d_model as f64;
    let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    for spec in &index.specs {
        let name = spec.name.as_str();
        let std = if name.ends_with("gain") {
            None
        } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b" {
            Some(0.0)
        } else if name.ends_with("emb") {
            Some(1.0)
        } else if name.ends_with("wo") {
            Some(residual_scale / d.sqrt())
        } else if name.ends_with("w2") {
            Some(residual_scale / (cfg.d_ff as f64).sqrt())
        } else {
            Some(1.0 / d.sqrt())
        };
        let slot = &mut p[spec.offset..spec.offset + spec.numel()];
        match std {
            None => slot.fill(1.0),
            Some(s) if s == 0.0 => slot.fill(0.0),
            Some(s) => {
                let normal = Normal::new(0.0, s).expect("positive std");
                slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
    }
    p
}
