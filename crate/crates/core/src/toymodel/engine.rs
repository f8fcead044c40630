//! Forward and backward passes of the toy transformer.
//!
//! Pre-norm blocks: `x + Attn(LN(x))` then `h + FFN(LN(h))`, GELU (tanh
//! form) in the FFN, a final LayerNorm and a linear output head. Attention is
//! evaluated only over each row's visible keys, which keeps the cost of the
//! compression mask proportional to what a row can actually see.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, Axis};

use crate::domain::TokenId;
use crate::error::{Error, Result};

use super::layout::{build_compression_mask, ModelInput, SegmentKind};
use super::params::{view1, view1_mut, view2, view2_mut, LayerIndex};
use super::ToyModel;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Visible keys of every row, flattened.
#[derive(Debug, Clone)]
pub(crate) struct KeyLists {
    pub offsets: Vec<usize>,
    pub keys: Vec<usize>,
}

impl KeyLists {
    pub fn from_input(input: &ModelInput) -> Self {
        let mask = build_compression_mask(&input.layout);
        let mut offsets = Vec::with_capacity(mask.size() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for q in 0..mask.size() {
            keys.extend(mask.row_keys(q));
            offsets.push(keys.len());
        }
        Self { offsets, keys }
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.keys[self.offsets[t]..self.offsets[t + 1]]
    }
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) struct LayerAct {
    pub ln1: LnCache,
    pub u1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// `probs[h][keys.offsets[t]..keys.offsets[t+1]]` is row `t` of head `h`.
    pub probs: Vec<Vec<f64>>,
    pub ctx: Array2<f64>,
    pub ln2: LnCache,
    pub u2: Array2<f64>,
    pub z: Array2<f64>,
    /// `tanh` term of the GELU at each `z`, kept for the backward pass.
    pub tz: Array2<f64>,
    pub g: Array2<f64>,
}

pub(crate) struct Activations {
    pub keys: KeyLists,
    pub layers: Vec<LayerAct>,
    pub x_final: Array2<f64>,
    pub lnf: LnCache,
    pub uf: Array2<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut out = Array2::zeros((rows, d));
    let mut inv_std = Vec::with_capacity(rows);
    for t in 0..rows {
        let row = x.row(t);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            xhat[[t, c]] = h;
            out[[t, c]] = h * gain[c] + bias[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dgain`, `dbias`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: ArrayView1<f64>,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Array2<f64> {
    let (rows, d) = dy.dim();
    let mut dx = Array2::zeros((rows, d));
    let mut dxhat = vec![0.0; d];
    for t in 0..rows {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let g = dy[[t, c]];
            let h = cache.xhat[[t, c]];
            dgain[c] += g * h;
            dbias[c] += g;
            dxhat[c] = g * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * h;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = cache.inv_std[t];
        for c in 0..d {
            dx[[t, c]] = inv * (dxhat[c] - mean_dxhat - cache.xhat[[t, c]] * mean_dxhat_xhat);
        }
    }
    dx
}

pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh())
}

fn gelu_tanh(z: f64) -> f64 {
    (GELU_C * (z + GELU_K * z * z * z)).tanh()
}

/// Derivative of the GELU given `z` and its `tanh` term.
fn gelu_grad(z: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
}

/// Softmax attention of one query row over `keys`, writing into `probs`
/// and the weighted value sum into `out`.
///
/// `kbuf` and `vbuf` are row-major with row stride `stride`; the head's
/// columns start at `col`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row(
    q_row: &[f64],
    keys: &[usize],
    kbuf: &[f64],
    vbuf: &[f64],
    stride: usize,
    col: usize,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let dh = q_row.len();
    let mut max = f64::NEG_INFINITY;
    for (p, &j) in probs.iter_mut().zip(keys) {
        let k = &kbuf[j * stride + col..j * stride + col + dh];
        let dot: f64 = q_row.iter().zip(k).map(|(a, b)| a * b).sum();
        *p = dot * scale;
        max = max.max(*p);
    }
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    out.fill(0.0);
    for (p, &j) in probs.iter_mut().zip(keys) {
        *p /= sum;
        let v = &vbuf[j * stride + col..j * stride + col + dh];
        for (o, x) in out.iter_mut().zip(v) {
            *o += *p * x;
        }
    }
}

impl ToyModel {
    pub(crate) fn validate_input(&self, input: &ModelInput) -> Result<()> {
        let len = input.layout.total_len();
        if len != input.tokens.len() {
            return Err(Error::LengthMismatch(format!(
                "layout covers {len} positions but {} tokens were given",
                input.tokens.len()
            )));
        }
        if len > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_positions,
            });
        }
        if let Some(&bad) = input
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::InvalidLayout(format!(
                "token id {bad} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn embed(&self, input: &ModelInput) -> Array2<f64> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let p = &self.params;
        let idx = &self.index;
        let mut x = Array2::zeros((input.tokens.len(), d));
        for (t, info) in input.layout.positions().iter().enumerate() {
            let mut row = x.row_mut(t);
            match info.kind {
                SegmentKind::Ct => {
                    let slot = info.offset % cfg.n_ct_embeddings;
                    row.assign(&view1(p, idx.ct_emb + slot * d, d));
                }
                SegmentKind::Raw => {
                    let tok = input.tokens[t] as usize;
                    row.assign(&view1(p, idx.tok_emb + tok * d, d));
                    row += &view1(p, idx.pos_emb + info.offset * d, d);
                }
            }
        }
        x
    }

    fn layer_forward(&self, li: &LayerIndex, x: &Array2<f64>, keys: &KeyLists) -> (Array2<f64>, LayerAct) {
        let cfg = &self.config;
        let (d, f, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let p = &self.params;
        let rows = x.nrows();
        let scale = 1.0 / (dh as f64).sqrt();

        let (u1, ln1) = layer_norm(x, view1(p, li.ln1_gain, d), view1(p, li.ln1_bias, d));
        let q = u1.dot(&view2(p, li.wq, d, d));
        let k = u1.dot(&view2(p, li.wk, d, d));
        let v = u1.dot(&view2(p, li.wv, d, d));

        let mut ctx = Array2::<f64>::zeros((rows, d));
        let mut probs = vec![vec![0.0; keys.keys.len()]; nh];
        {
            let qs = q.as_slice().expect("standard layout");
            let ks = k.as_slice().expect("standard layout");
            let vs = v.as_slice().expect("standard layout");
            let cs = ctx.as_slice_mut().expect("standard layout");
            for (h, probs_h) in probs.iter_mut().enumerate() {
                let col = h * dh;
                for t in 0..rows {
                    let (lo, hi) = (keys.offsets[t], keys.offsets[t + 1]);
                    attend_row(
                        &qs[t * d + col..t * d + col + dh],
                        keys.row(t),
                        ks,
                        vs,
                        d,
                        col,
                        scale,
                        &mut probs_h[lo..hi],
                        &mut cs[t * d + col..t * d + col + dh],
                    );
                }
            }
        }
        let h1 = x + &ctx.dot(&view2(p, li.wo, d, d));
        let (u2, ln2) = layer_norm(&h1, view1(p, li.ln2_gain, d), view1(p, li.ln2_bias, d));
        let mut z = u2.dot(&view2(p, li.w1, d, f));
        z += &view1(p, li.b1, f);
        let tz = z.mapv(gelu_tanh);
        let mut g = z.clone();
        g.zip_mut_with(&tz, |g, &t| *g *= 0.5 * (1.0 + t));
        let mut out = g.dot(&view2(p, li.w2, f, d));
        out += &view1(p, li.b2, d);
        out += &h1;
        let act = LayerAct {
            ln1,
            u1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            u2,
            z,
            tz,
            g,
        };
        (out, act)
    }

    pub(crate) fn activations(&self, input: &ModelInput) -> Result<Activations> {
        self.validate_input(input)?;
        let keys = KeyLists::from_input(input);
        let mut x = self.embed(input);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for li in &self.index.layers {
            let (next, act) = self.layer_forward(li, &x, &keys);
            layers.push(act);
            x = next;
        }
        let d = self.config.d_model;
        let (uf, lnf) = layer_norm(
            &x,
            view1(&self.params, self.index.lnf_gain, d),
            view1(&self.params, self.index.lnf_bias, d),
        );
        Ok(Activations {
            keys,
            layers,
            x_final: x,
            lnf,
            uf,
        })
    }

    /// Output logits for the given rows.
    pub(crate) fn logits_at(&self, act: &Activations, positions: &[usize]) -> Array2<f64> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let rows = act.uf.select(Axis(0), positions);
        let mut logits = rows.dot(&view2(&self.params, self.index.head_w, d, v));
        logits += &view1(&self.params, self.index.head_b, v);
        logits
    }

    /// Backpropagates `dlogits` (one row per entry of `positions`) into a
    /// gradient laid out like the parameter vector.
    pub(crate) fn backward(
        &self,
        input: &ModelInput,
        act: &Activations,
        positions: &[usize],
        dlogits: &Array2<f64>,
        grad: &mut [f64],
    ) {
        let cfg = &self.config;
        let (d, f, v, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads, cfg.head_dim());
        let idx = &self.index;
        let p = &self.params;
        let rows = act.uf.nrows();
        let scale = 1.0 / (dh as f64).sqrt();

        let uf_sel = act.uf.select(Axis(0), positions);
        general_mat_mul(1.0, &uf_sel.t(), dlogits, 1.0, &mut view2_mut(grad, idx.head_w, d, v));
        view1_mut(grad, idx.head_b, v).scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        let duf_sel = dlogits.dot(&view2(p, idx.head_w, d, v).t());
        let mut duf = Array2::<f64>::zeros((rows, d));
        for (r, &t) in positions.iter().enumerate() {
            let mut row = duf.row_mut(t);
            row += &duf_sel.row(r);
        }
        let mut dx = {
            let (dg, db) = split_pair(grad, idx.lnf_gain, idx.lnf_bias, d);
            layer_norm_backward(&duf, &act.lnf, view1(p, idx.lnf_gain, d), dg, db)
        };

        for (li, la) in idx.layers.iter().zip(&act.layers).rev() {
            // Feed-forward branch.
            general_mat_mul(1.0, &la.g.t(), &dx, 1.0, &mut view2_mut(grad, li.w2, f, d));
            view1_mut(grad, li.b2, d).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let mut dz = dx.dot(&view2(p, li.w2, f, d).t());
            ndarray::Zip::from(&mut dz)
                .and(&la.z)
                .and(&la.tz)
                .for_each(|g, &z, &t| *g *= gelu_grad(z, t));
            general_mat_mul(1.0, &la.u2.t(), &dz, 1.0, &mut view2_mut(grad, li.w1, d, f));
            view1_mut(grad, li.b1, f).scaled_add(1.0, &dz.sum_axis(Axis(0)));
            let du2 = dz.dot(&view2(p, li.w1, d, f).t());
            let dh1 = {
                let (dg, db) = split_pair(grad, li.ln2_gain, li.ln2_bias, d);
                let mut dh1 = layer_norm_backward(&du2, &la.ln2, view1(p, li.ln2_gain, d), dg, db);
                dh1 += &dx;
                dh1
            };

            // Attention branch.
            general_mat_mul(1.0, &la.ctx.t(), &dh1, 1.0, &mut view2_mut(grad, li.wo, d, d));
            let dctx = dh1.dot(&view2(p, li.wo, d, d).t());
            let mut dq = Array2::<f64>::zeros((rows, d));
            let mut dk = Array2::<f64>::zeros((rows, d));
            let mut dv = Array2::<f64>::zeros((rows, d));
            {
                let qs = la.q.as_slice().expect("standard layout");
                let ks = la.k.as_slice().expect("standard layout");
                let vs = la.v.as_slice().expect("standard layout");
                let dcs = dctx.as_slice().expect("standard layout");
                let dqs = dq.as_slice_mut().expect("standard layout");
                let dks = dk.as_slice_mut().expect("standard layout");
                let dvs = dv.as_slice_mut().expect("standard layout");
                let mut dp = Vec::new();
                for h in 0..nh {
                    let col = h * dh;
                    for t in 0..rows {
                        let keys = act.keys.row(t);
                        let probs = &la.probs[h][act.keys.offsets[t]..act.keys.offsets[t + 1]];
                        let dc = &dcs[t * d + col..t * d + col + dh];
                        dp.clear();
                        let mut weighted = 0.0;
                        for (&j, &pj) in keys.iter().zip(probs) {
                            let vj = &vs[j * d + col..j * d + col + dh];
                            let g: f64 = dc.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dp.push(g);
                            weighted += pj * g;
                            let dvj = &mut dvs[j * d + col..j * d + col + dh];
                            for (o, c) in dvj.iter_mut().zip(dc) {
                                *o += pj * c;
                            }
                        }
                        let qt = &qs[t * d + col..t * d + col + dh];
                        for ((&j, &pj), &g) in keys.iter().zip(probs).zip(&dp) {
                            let ds = pj * (g - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &ks[j * d + col..j * d + col + dh];
                            let dqt = &mut dqs[t * d + col..t * d + col + dh];
                            for (o, kv) in dqt.iter_mut().zip(kj) {
                                *o += ds * kv;
                            }
                            let dkj = &mut dks[j * d + col..j * d + col + dh];
                            for (o, qv) in dkj.iter_mut().zip(qt) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
            }
            general_mat_mul(1.0, &la.u1.t(), &dq, 1.0, &mut view2_mut(grad, li.wq, d, d));
            general_mat_mul(1.0, &la.u1.t(), &dk, 1.0, &mut view2_mut(grad, li.wk, d, d));
            general_mat_mul(1.0, &la.u1.t(), &dv, 1.0, &mut view2_mut(grad, li.wv, d, d));
            let mut du1 = dq.dot(&view2(p, li.wq, d, d).t());
            general_mat_mul(1.0, &dk, &view2(p, li.wk, d, d).t(), 1.0, &mut du1);
            general_mat_mul(1.0, &dv, &view2(p, li.wv, d, d).t(), 1.0, &mut du1);
            let (dg, db) = split_pair(grad, li.ln1_gain, li.ln1_bias, d);
            let mut dprev = layer_norm_backward(&du1, &la.ln1, view1(p, li.ln1_gain, d), dg, db);
            dprev += &dh1;
            dx = dprev;
        }

        for (t, info) in input.layout.positions().iter().enumerate() {
            let row = dx.row(t);
            let offset = match info.kind {
                SegmentKind::Ct => idx.ct_emb + (info.offset % cfg.n_ct_embeddings) * d,
                SegmentKind::Raw => {
                    let tok = input.tokens[t] as usize;
                    view1_mut(grad, idx.pos_emb + info.offset * d, d).scaled_add(1.0, &row);
                    idx.tok_emb + tok * d
                }
            };
            view1_mut(grad, offset, d).scaled_add(1.0, &row);
        }
    }
}

/// Two disjoint `len`-element gradient slices; `a` must precede `b`.
fn split_pair(grad: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (head, tail) = grad.split_at_mut(b);
    (&mut head[a..a + len], &mut tail[..len])
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax_with_probs(logits).0
}

/// Row-wise log-softmax and softmax from one exponentiation per entry.
pub(crate) fn log_softmax_with_probs(logits: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut logp = logits.clone();
    let mut probs = logits.clone();
    for (mut lrow, mut prow) in logp.rows_mut().into_iter().zip(probs.rows_mut()) {
        let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prow.mapv_inplace(|x| (x - max).exp());
        let sum = prow.sum();
        prow /= sum;
        let lse = sum.ln() + max;
        lrow.mapv_inplace(|x| x - lse);
    }
    (logp, probs)
}

/// Dense per-head attention matrix for one layer.
pub(crate) fn dense_attention(act: &LayerAct, keys: &KeyLists, head: usize) -> Array2<f64> {
    let rows = keys.offsets.len() - 1;
    let mut out = Array2::zeros((rows, rows));
    for t in 0..rows {
        let probs = &act.probs[head][keys.offsets[t]..keys.offsets[t + 1]];
        for (&j, &pj) in keys.row(t).iter().zip(probs) {
            out[[t, j]] = pj;
        }
    }
    out
}

/// Head-averaged attention row `t` of one layer, as `(key, weight)` pairs.
pub(crate) fn mean_head_row(act: &LayerAct, keys: &KeyLists, t: usize) -> Vec<(usize, f64)> {
    let nh = act.probs.len() as f64;
    let lo = keys.offsets[t];
    keys.row(t)
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let total: f64 = act.probs.iter().map(|p| p[lo + i]).sum();
            (j, total / nh)
        })
        .collect()
}

pub(crate) fn token_row(logp: &Array2<f64>, r: usize, tok: TokenId) -> f64 {
    logp[[r, tok as usize]]
}
