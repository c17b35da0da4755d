//! Dilated 1-D convolution and weight normalization.

use crate::error::{invalid, shape_err, NnError, Result};
use crate::gemm::{gemm, MatRef};
use crate::graph::{Graph, Operation, Var};

/// Output length of a dilated convolution with explicit padding, or `None`
/// if the padded input is shorter than the kernel span.
pub fn conv1d_output_len(
    len: usize,
    kernel: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
) -> Option<usize> {
    let span = (kernel - 1) * dilation;
    (len + pad_left + pad_right).checked_sub(span).filter(|&n| n > 0)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    len_out: usize,
    kernel: usize,
    dilation: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.batch * self.len_out
    }

    /// Unfolds the whole batch into a `(c_in*kernel) × (batch*len_out)`
    /// matrix; column `b*len_out + t` holds the receptive field of output `t`
    /// of item `b`.
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let ConvGeom { batch, c_in, len, len_out, kernel, dilation, pad_left, .. } = *self;
        let cols = self.cols();
        for c in 0..c_in {
            for j in 0..kernel {
                let row = &mut col[(c * kernel + j) * cols..(c * kernel + j + 1) * cols];
                let shift = (j * dilation) as isize - pad_left as isize;
                // Valid output range: 0 <= t + shift < len.
                let lo = (-shift).clamp(0, len_out as isize) as usize;
                let hi = (len as isize - shift).clamp(lo as isize, len_out as isize) as usize;
                for b in 0..batch {
                    let xr = &x[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                    let seg = &mut row[b * len_out..(b + 1) * len_out];
                    seg[..lo].fill(0.0);
                    seg[hi..].fill(0.0);
                    if hi == lo {
                        continue;
                    }
                    let src = (lo as isize + shift) as usize;
                    seg[lo..hi].copy_from_slice(&xr[src..src + hi - lo]);
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f32], dx: &mut [f32]) {
        let ConvGeom { batch, c_in, len, len_out, kernel, dilation, pad_left, .. } = *self;
        let cols = self.cols();
        for c in 0..c_in {
            for j in 0..kernel {
                let row = &col[(c * kernel + j) * cols..(c * kernel + j + 1) * cols];
                let shift = (j * dilation) as isize - pad_left as isize;
                let lo = (-shift).clamp(0, len_out as isize) as usize;
                let hi = (len as isize - shift).clamp(lo as isize, len_out as isize) as usize;
                for b in 0..batch {
                    let xr = &mut dx[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                    if hi == lo {
                        continue;
                    }
                    let seg = &row[b * len_out + lo..b * len_out + hi];
                    let src = (lo as isize + shift) as usize;
                    for (d, v) in xr[src..src + hi - lo].iter_mut().zip(seg) {
                        *d += v;
                    }
                }
            }
        }
    }

    /// `[c_out, batch*len_out]` ⇄ `[batch, c_out, len_out]`.
    fn unfold_batch(&self, src: &[f32], dst: &mut [f32], to_batch_major: bool) {
        let (c_out, len_out, cols) = (self.c_out, self.len_out, self.cols());
        for b in 0..self.batch {
            for o in 0..c_out {
                let wide = o * cols + b * len_out..o * cols + (b + 1) * len_out;
                let bm = (b * c_out + o) * len_out..(b * c_out + o + 1) * len_out;
                if to_batch_major {
                    dst[bm].copy_from_slice(&src[wide]);
                } else {
                    dst[wide].copy_from_slice(&src[bm]);
                }
            }
        }
    }
}

struct Conv1d {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
}

impl Operation for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, graph: &Graph, _: Var, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let geom = self.geom;
        let rows = geom.c_in * geom.kernel;
        let cols = geom.cols();
        let x = graph.data(self.x);
        let mut dy = vec![0.0; geom.c_out * cols];
        geom.unfold_batch(g, &mut dy, false);
        let dy = MatRef::row_major(&dy, geom.c_out, cols);
        let mut col = vec![0.0; rows * cols];
        let dw = needs[1].then(|| {
            geom.im2col(x, &mut col);
            let mut dw = vec![0.0; geom.c_out * rows];
            gemm(1.0, dy, MatRef::row_major(&col, rows, cols).t(), 0.0, &mut dw);
            dw
        });
        let dx = needs[0].then(|| {
            let w = MatRef::row_major(graph.data(self.w), geom.c_out, rows);
            gemm(1.0, w.t(), dy, 0.0, &mut col);
            let mut dx = vec![0.0; x.len()];
            geom.col2im_add(&col, &mut dx);
            dx
        });
        let mut out = vec![dx, dw];
        if self.b.is_some() {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0f64; geom.c_out];
                for (i, row) in g.chunks_exact(geom.len_out).enumerate() {
                    db[i % geom.c_out] += row.iter().map(|&v| f64::from(v)).sum::<f64>();
                }
                db.into_iter().map(|v| v as f32).collect()
            }));
        }
        out
    }
}

struct WeightNorm {
    v: Var,
    g: Var,
    rows: usize,
    row_len: usize,
    norms: Vec<f64>,
}

impl Operation for WeightNorm {
    fn name(&self) -> &'static str {
        "weight_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.v, self.g]
    }

    fn backward(&self, graph: &Graph, _: Var, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let v = graph.data(self.v);
        let gain = graph.data(self.g);
        let mut dv = needs[0].then(|| vec![0.0; v.len()]);
        let mut dg = needs[1].then(|| vec![0.0; self.rows]);
        for r in 0..self.rows {
            let span = r * self.row_len..(r + 1) * self.row_len;
            let vr = &v[span.clone()];
            let gr = &grad[span.clone()];
            let norm = self.norms[r];
            // Projection of the incoming gradient on the unit direction.
            let proj: f64 = vr.iter().zip(gr).map(|(&v, &g)| f64::from(v) * f64::from(g)).sum::<f64>() / norm;
            if let Some(dg) = dg.as_mut() {
                dg[r] = proj as f32;
            }
            if let Some(dv) = dv.as_mut() {
                let scale = f64::from(gain[r]) / norm;
                for ((d, &v), &g) in dv[span].iter_mut().zip(vr).zip(gr) {
                    *d = (scale * (f64::from(g) - proj * f64::from(v) / norm)) as f32;
                }
            }
        }
        vec![dv, dg]
    }
}

impl Graph {
    /// Dilated 1-D convolution over `x: [B, C_in, L]` with
    /// `w: [C_out, C_in, k]`:
    /// `y[b,o,t] = bias[o] + Σ_{c,j} w[o,c,j] · x_pad[b,c,t + j·d]`,
    /// where `x_pad` carries `pad_left`/`pad_right` zeros. Causal use pads
    /// `(k-1)·d` on the left only, giving an output of length `L`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, c_in, len] = xs[..] else {
            return shape_err("conv1d", "input [B, C_in, L]", xs);
        };
        let [c_out, w_in, kernel] = ws[..] else {
            return shape_err("conv1d", "weight [C_out, C_in, k]", ws);
        };
        if w_in != c_in {
            return shape_err("conv1d", format!("weight with C_in = {c_in}"), ws);
        }
        if kernel < 1 || dilation < 1 {
            return invalid("conv1d", format!("kernel {kernel} and dilation {dilation} must be >= 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return shape_err("conv1d", [c_out], self.shape(b));
            }
        }
        let Some(len_out) = conv1d_output_len(len, kernel, dilation, pad_left, pad_right) else {
            return invalid("conv1d", "padded input shorter than the dilated kernel");
        };
        let geom = ConvGeom { batch, c_in, c_out, len, len_out, kernel, dilation, pad_left };
        let rows = c_in * kernel;
        let cols = geom.cols();
        let mut col = vec![0.0; rows * cols];
        geom.im2col(self.data(x), &mut col);
        let mut wide = vec![0.0; c_out * cols];
        gemm(1.0, MatRef::row_major(self.data(w), c_out, rows), MatRef::row_major(&col, rows, cols), 0.0, &mut wide);
        let mut out = vec![0.0; batch * c_out * len_out];
        geom.unfold_batch(&wide, &mut out, true);
        if let Some(b) = b {
            let bias = self.data(b);
            for (i, row) in out.chunks_exact_mut(len_out).enumerate() {
                let v = bias[i % c_out];
                row.iter_mut().for_each(|y| *y += v);
            }
        }
        Ok(self.push_op(vec![batch, c_out, len_out], out, Box::new(Conv1d { x, w, b, geom })))
    }

    /// Causal convolution: left padding of `(k-1)·d`, output length `L`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let kernel = *self.shape(w).last().unwrap_or(&1);
        self.conv1d(x, w, b, dilation, kernel.saturating_sub(1) * dilation, 0)
    }

    /// Weight-normalized parameter `w[o] = g[o] · v[o] / ‖v[o]‖`, where `o`
    /// indexes the leading axis of `v`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        let Some(&rows) = vs.first() else {
            return shape_err("weight_norm", "rank >= 1", vs);
        };
        if self.shape(g) != [rows] {
            return shape_err("weight_norm", [rows], self.shape(g));
        }
        let row_len = self.value(v).len() / rows.max(1);
        let vd = self.data(v);
        let gd = self.data(g);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(vd.len());
        for r in 0..rows {
            let vr = &vd[r * row_len..(r + 1) * row_len];
            let norm = vr.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(NnError::ZeroNorm { channel: r });
            }
            let scale = f64::from(gd[r]) / norm;
            data.extend(vr.iter().map(|&x| (f64::from(x) * scale) as f32));
            norms.push(norm);
        }
        Ok(self.push_op(vs, data, Box::new(WeightNorm { v, g, rows, row_len, norms })))
    }
}
