//! Multi-head self-attention restricted to non-overlapping chunks.
//!
//! The sequence is split into blocks of `chunk` positions and every query
//! attends only to keys of its own block, so the score work is `L·chunk`
//! per head instead of `L²`. When `chunk` does not divide `L`, the sequence
//! is conceptually left-padded with zero positions up to the next multiple;
//! padded keys are masked out of the softmax and padded queries are never
//! materialized.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Operation, Var};
use crate::ops::basic::dropout_scale;

/// Score slots evaluated per (batch item, head): every real query scores
/// all `chunk` slots of its block.
pub fn attention_score_entries(len: usize, chunk: usize) -> u64 {
    (len * chunk.min(len.max(1))) as u64
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    len: usize,
    width: usize,
    heads: usize,
    head_dim: usize,
    chunk: usize,
    pad: usize,
}

impl Geometry {
    #[inline]
    fn prob_index(&self, b: usize, h: usize, t: usize) -> usize {
        ((b * self.heads + h) * self.len + t) * self.chunk
    }

    /// Real positions covered by each block, with the slot of the first one.
    fn blocks(&self) -> impl Iterator<Item = (std::ops::Range<usize>, usize)> + '_ {
        let n = (self.len + self.pad).div_ceil(self.chunk);
        (0..n).map(move |i| {
            let start = (i * self.chunk).saturating_sub(self.pad);
            let end = (i + 1) * self.chunk - self.pad;
            (start..end, start + self.pad - i * self.chunk)
        })
    }

    /// Copies head `h` of item `b` from `[B, L, C]` into a dense `[L, head_dim]`.
    fn gather(&self, src: &[f32], b: usize, h: usize, dst: &mut [f32]) {
        let d = self.head_dim;
        for t in 0..self.len {
            let row = (b * self.len + t) * self.width + h * d;
            dst[t * d..(t + 1) * d].copy_from_slice(&src[row..row + d]);
        }
    }

    fn scatter(&self, src: &[f32], b: usize, h: usize, dst: &mut [f32]) {
        let d = self.head_dim;
        for t in 0..self.len {
            let row = (b * self.len + t) * self.width + h * d;
            dst[row..row + d].copy_from_slice(&src[t * d..(t + 1) * d]);
        }
    }
}

struct ChunkedAttention {
    q: Var,
    k: Var,
    v: Var,
    geom: Geometry,
    /// Softmax probabilities, `[B, H, L, chunk]`; masked slots hold 0.
    probs: Vec<f32>,
    /// Dropout multipliers on the probabilities, same layout, when active.
    drop: Option<Vec<f32>>,
}

impl Operation for ChunkedAttention {
    fn name(&self) -> &'static str {
        "chunked_attention"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.q, self.k, self.v]
    }

    fn backward(&self, graph: &Graph, _: Var, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let gm = self.geom;
        let (q, k, v) = (graph.data(self.q), graph.data(self.k), graph.data(self.v));
        let n = q.len();
        let mut dq = vec![0.0f32; n];
        let mut dk = vec![0.0f32; n];
        let mut dv = vec![0.0f32; n];
        let scale = 1.0 / (gm.head_dim as f32).sqrt();
        let (len, d, chunk) = (gm.len, gm.head_dim, gm.chunk);
        let mut bufs = vec![0.0f32; 7 * len * d];
        let mut dp = vec![0.0f32; chunk];
        for b in 0..gm.batch {
            for h in 0..gm.heads {
                let (qh, rest) = bufs.split_at_mut(len * d);
                let (kh, rest) = rest.split_at_mut(len * d);
                let (vh, rest) = rest.split_at_mut(len * d);
                let (gh, rest) = rest.split_at_mut(len * d);
                let (dqh, rest) = rest.split_at_mut(len * d);
                let (dkh, dvh) = rest.split_at_mut(len * d);
                gm.gather(q, b, h, qh);
                gm.gather(k, b, h, kh);
                gm.gather(v, b, h, vh);
                gm.gather(g, b, h, gh);
                dqh.fill(0.0);
                dkh.fill(0.0);
                dvh.fill(0.0);
                for (range, j0) in gm.blocks() {
                    let keys = range.clone();
                    for t in range {
                        let pi = gm.prob_index(b, h, t);
                        let probs = &self.probs[pi + j0..pi + chunk];
                        let keep = self.drop.as_ref().map(|dr| &dr[pi + j0..pi + chunk]);
                        let go = &gh[t * d..(t + 1) * d];
                        for (j, s) in keys.clone().enumerate() {
                            let kp = keep.map_or(1.0, |kp| kp[j]);
                            let p = probs[j] * kp;
                            let vr = &vh[s * d..(s + 1) * d];
                            let dvr = &mut dvh[s * d..(s + 1) * d];
                            let mut acc = 0.0;
                            for e in 0..d {
                                acc += go[e] * vr[e];
                                dvr[e] += p * go[e];
                            }
                            dp[j] = acc * kp;
                        }
                        let dp = &dp[..probs.len()];
                        let dot: f32 = probs.iter().zip(dp).map(|(p, g)| p * g).sum();
                        for (j, s) in keys.clone().enumerate() {
                            let ds = probs[j] * (dp[j] - dot) * scale;
                            for e in 0..d {
                                dqh[t * d + e] += ds * kh[s * d + e];
                                dkh[s * d + e] += ds * qh[t * d + e];
                            }
                        }
                    }
                }
                gm.scatter(dqh, b, h, &mut dq);
                gm.scatter(dkh, b, h, &mut dk);
                gm.scatter(dvh, b, h, &mut dv);
            }
        }
        vec![needs[0].then_some(dq), needs[1].then_some(dk), needs[2].then_some(dv)]
    }
}

/// Projection parameters of one attention layer; weights are `[C, C]`
/// (input-major, see [`Graph::linear`]) and biases `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Option<Var>,
    pub wk: Var,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Option<Var>,
    pub wo: Var,
    pub bo: Option<Var>,
}

impl Graph {
    /// Scaled dot-product attention of already-projected `q`, `k`, `v`
    /// (`[B, L, C]`, heads interleaved along `C`) within chunks of length
    /// `chunk`. Dropout with rate `dropout_p` is applied to the attention
    /// probabilities in training mode.
    pub fn chunked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        chunk: usize,
        dropout_p: f32,
        site: u64,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let [batch, len, width] = shape[..] else {
            return shape_err("chunked_attention", "[B, L, C]", shape);
        };
        if self.shape(k) != shape || self.shape(v) != shape {
            return shape_err("chunked_attention", &shape, (self.shape(k), self.shape(v)));
        }
        if heads == 0 || width % heads != 0 {
            return invalid("chunked_attention", format!("width {width} not divisible by {heads} heads"));
        }
        if chunk == 0 {
            return invalid("chunked_attention", "chunk size must be >= 1");
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return invalid("chunked_attention", format!("dropout {dropout_p} outside [0, 1)"));
        }
        let chunk = chunk.min(len);
        let geom =
            Geometry { batch, len, width, heads, head_dim: width / heads, chunk, pad: (chunk - len % chunk) % chunk };
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let scale = 1.0 / (geom.head_dim as f32).sqrt();
        let d = geom.head_dim;
        let mut probs = vec![0.0f32; batch * heads * len * chunk];
        let mut bufs = vec![0.0f32; 2 * len * d];
        for b in 0..batch {
            for h in 0..heads {
                let (qh, kh) = bufs.split_at_mut(len * d);
                geom.gather(qd, b, h, qh);
                geom.gather(kd, b, h, kh);
                for (range, j0) in geom.blocks() {
                    let keys = range.clone();
                    for t in range {
                        let pi = geom.prob_index(b, h, t);
                        let p = &mut probs[pi + j0..pi + chunk];
                        let qr = &qh[t * d..(t + 1) * d];
                        let mut max = f32::NEG_INFINITY;
                        for (slot, s) in p.iter_mut().zip(keys.clone()) {
                            let kr = &kh[s * d..(s + 1) * d];
                            *slot = qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() * scale;
                            max = max.max(*slot);
                        }
                        let mut total = 0.0f32;
                        for x in p.iter_mut() {
                            *x = (*x - max).exp();
                            total += *x;
                        }
                        let inv = 1.0 / total;
                        p.iter_mut().for_each(|x| *x *= inv);
                    }
                }
            }
        }
        let evaluated = (batch * heads * len * chunk) as u64;
        let mode = self.mode();
        let drop = (mode.training && dropout_p > 0.0)
            .then(|| dropout_scale(probs.len(), dropout_p, mode.seed, site, mode.step));

        let mut out = vec![0.0f32; qd.len()];
        let mut bufs = vec![0.0f32; 2 * len * d];
        for b in 0..batch {
            for h in 0..heads {
                let (vh, oh) = bufs.split_at_mut(len * d);
                geom.gather(vd, b, h, vh);
                oh.fill(0.0);
                for (range, j0) in geom.blocks() {
                    let keys = range.clone();
                    for t in range {
                        let pi = geom.prob_index(b, h, t);
                        let or = &mut oh[t * d..(t + 1) * d];
                        for (j, s) in keys.clone().enumerate() {
                            let p = probs[pi + j0 + j] * drop.as_ref().map_or(1.0, |dr| dr[pi + j0 + j]);
                            for (o, x) in or.iter_mut().zip(&vh[s * d..(s + 1) * d]) {
                                *o += p * x;
                            }
                        }
                    }
                }
                geom.scatter(oh, b, h, &mut out);
            }
        }
        self.stats_mut().attention_score_entries += evaluated;
        Ok(self.push_op(shape, out, Box::new(ChunkedAttention { q, k, v, geom, probs, drop })))
    }

    /// Full multi-head chunked self-attention on `x: [B, L, C]`: Q/K/V
    /// projections, per-chunk attention, output projection.
    pub fn multi_head_chunked_attention(
        &mut self,
        x: Var,
        w: &AttentionWeights,
        heads: usize,
        chunk: usize,
        dropout_p: f32,
        site: u64,
    ) -> Result<Var> {
        let q = self.linear(x, w.wq, w.bq)?;
        let k = self.linear(x, w.wk, w.bk)?;
        let v = self.linear(x, w.wv, w.bv)?;
        let a = self.chunked_attention(q, k, v, heads, chunk, dropout_p, site)?;
        self.linear(a, w.wo, w.bo)
    }
}
