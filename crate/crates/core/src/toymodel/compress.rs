//! Chunk-by-chunk compression with a per-layer cache of earlier chunks'
//! compression-token keys and values.

use ndarray::{s, Array2};

use crate::domain::{AllocationPlan, Chunk};
use crate::error::{Error, Result};

use super::engine::{attend_row, gelu, layer_norm};
use super::params::{view1, view2};
use super::{EncodedSequence, ToyModel, CHUNK_START};

impl ToyModel {
    fn check_compressible(&self, chunks: &[Chunk], plan: &AllocationPlan) -> Result<EncodedSequence> {
        if let Some(i) = plan.counts.iter().position(|&c| c == 0) {
            return Err(Error::ZeroCountChunk(i));
        }
        let seq = EncodedSequence::new(chunks, &plan.counts, None)?;
        self.validate_input(&seq.input)?;
        Ok(seq)
    }

    /// Final-layer hidden states at every compression-token position,
    /// computed one chunk at a time: chunk `i` sees the cached compression
    /// tokens of chunks `< i` and its own tokens.
    pub fn compress_sequence(&self, chunks: &[Chunk], plan: &AllocationPlan) -> Result<Array2<f64>> {
        self.check_compressible(chunks, plan)?;
        let cfg = &self.config;
        let (d, f, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let idx = &self.index;

        let mut cache_k: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_layers];
        let mut cache_v: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_layers];
        let mut cached = 0usize;
        let total_ct: usize = plan.counts.iter().sum();
        let mut out = Array2::zeros((total_ct, d));
        let mut written = 0;

        for (chunk, &count) in chunks.iter().zip(&plan.counts) {
            let raw_len = chunk.len() + 1;
            let n = raw_len + count;
            let mut x = Array2::<f64>::zeros((n, d));
            for r in 0..n {
                let mut row = x.row_mut(r);
                if r < raw_len {
                    let tok = if r == 0 { CHUNK_START } else { chunk.tokens[r - 1] } as usize;
                    row.assign(&view1(p, idx.tok_emb + tok * d, d));
                    row += &view1(p, idx.pos_emb + r * d, d);
                } else {
                    let slot = (r - raw_len) % cfg.n_ct_embeddings;
                    row.assign(&view1(p, idx.ct_emb + slot * d, d));
                }
            }

            for (l, li) in idx.layers.iter().enumerate() {
                let (u1, _) = layer_norm(&x, view1(p, li.ln1_gain, d), view1(p, li.ln1_bias, d));
                let q = u1.dot(&view2(p, li.wq, d, d));
                let k = u1.dot(&view2(p, li.wk, d, d));
                let v = u1.dot(&view2(p, li.wv, d, d));

                let mut kbuf = cache_k[l].clone();
                kbuf.extend(k.iter());
                let mut vbuf = cache_v[l].clone();
                vbuf.extend(v.iter());

                // Every current row sees all cached compression tokens and the
                // current positions up to itself.
                let mut ctx = Array2::<f64>::zeros((n, d));
                let qs = q.as_slice().expect("standard layout");
                let cs = ctx.as_slice_mut().expect("standard layout");
                let mut probs = Vec::new();
                for h in 0..nh {
                    let col = h * dh;
                    for r in 0..n {
                        let keys: Vec<usize> = (0..cached + r + 1).collect();
                        probs.resize(keys.len(), 0.0);
                        attend_row(
                            &qs[r * d + col..r * d + col + dh],
                            &keys,
                            &kbuf,
                            &vbuf,
                            d,
                            col,
                            scale,
                            &mut probs,
                            &mut cs[r * d + col..r * d + col + dh],
                        );
                    }
                }
                let h1 = &x + &ctx.dot(&view2(p, li.wo, d, d));
                let (u2, _) = layer_norm(&h1, view1(p, li.ln2_gain, d), view1(p, li.ln2_bias, d));
                let mut z = u2.dot(&view2(p, li.w1, d, f));
                z += &view1(p, li.b1, f);
                let g = z.mapv(gelu);
                let mut next = g.dot(&view2(p, li.w2, f, d));
                next += &view1(p, li.b2, d);
                next += &h1;

                cache_k[l].extend(k.slice(s![raw_len.., ..]).iter());
                cache_v[l].extend(v.slice(s![raw_len.., ..]).iter());
                x = next;
            }
            out.slice_mut(s![written..written + count, ..])
                .assign(&x.slice(s![raw_len.., ..]));
            written += count;
            cached += count;
        }
        Ok(out)
    }

    /// The same compression-token states from one masked pass over the whole
    /// document.
    pub fn compress_full_pass(&self, chunks: &[Chunk], plan: &AllocationPlan) -> Result<Array2<f64>> {
        let seq = self.check_compressible(chunks, plan)?;
        let act = self.activations(&seq.input)?;
        Ok(act.x_final.select(ndarray::Axis(0), &seq.ct_positions))
    }
}
