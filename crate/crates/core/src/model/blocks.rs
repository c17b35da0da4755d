use pace_nn::{AttentionWeights, Graph, Var};

use super::Padding;
use crate::error::{Error, Result};

/// A weight-normalized convolution: direction `v`, per-channel gain `g`, bias `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvUnit<T> {
    pub v: T,
    pub g: T,
    pub b: T,
}

/// Dilated temporal block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dtb<T> {
    pub units: Vec<ConvUnit<T>>,
}

/// Chunked attention block: Q/K/V/output projections and a layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cab<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub gain: T,
    pub shift: T,
}

/// Dual-head output block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dhb<T> {
    pub conv_w: T,
    pub conv_b: T,
    pub conv_out_w: T,
    pub conv_out_b: T,
    pub linear_w: T,
    pub linear_b: T,
    pub alpha_logit: T,
}

/// Where every parameter of the model lives: tensor indices, or graph
/// variables once bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout<T> {
    pub input_w: T,
    pub input_b: T,
    pub dtbs: Vec<Dtb<T>>,
    pub cabs: Vec<Cab<T>>,
    pub dhb: Dhb<T>,
}

impl<T: Copy> Layout<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> Layout<U> {
        Layout {
            input_w: f(self.input_w),
            input_b: f(self.input_b),
            dtbs: self
                .dtbs
                .iter()
                .map(|d| Dtb { units: d.units.iter().map(|u| ConvUnit { v: f(u.v), g: f(u.g), b: f(u.b) }).collect() })
                .collect(),
            cabs: self
                .cabs
                .iter()
                .map(|c| Cab {
                    wq: f(c.wq),
                    bq: f(c.bq),
                    wk: f(c.wk),
                    bk: f(c.bk),
                    wv: f(c.wv),
                    bv: f(c.bv),
                    wo: f(c.wo),
                    bo: f(c.bo),
                    gain: f(c.gain),
                    shift: f(c.shift),
                })
                .collect(),
            dhb: Dhb {
                conv_w: f(self.dhb.conv_w),
                conv_b: f(self.dhb.conv_b),
                conv_out_w: f(self.dhb.conv_out_w),
                conv_out_b: f(self.dhb.conv_out_b),
                linear_w: f(self.dhb.linear_w),
                linear_b: f(self.dhb.linear_b),
                alpha_logit: f(self.dhb.alpha_logit),
            },
        }
    }
}

/// Per-block settings of a temporal block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtbSpec {
    pub dilation: usize,
    pub padding: Padding,
    pub dropout: f32,
    /// Dropout stream id; unit `u` uses `site + u`.
    pub site: u64,
}

/// `x + unit_n(…unit_1(x))` where each unit is conv → causal alignment →
/// ReLU → dropout. `x: [B, C, L]`.
pub fn dtb_forward(g: &mut Graph, p: &Dtb<Var>, x: Var, spec: &DtbSpec) -> Result<Var> {
    let mut h = x;
    for (u, unit) in p.units.iter().enumerate() {
        let w = g.weight_norm(unit.v, unit.g)?;
        let k = *g.shape(w).last().unwrap_or(&1);
        let pad = (k - 1) * spec.dilation;
        h = match spec.padding {
            Padding::Causal => g.causal_conv1d(h, w, Some(unit.b), spec.dilation)?,
            Padding::SymmetricChomp => {
                let y = g.conv1d(h, w, Some(unit.b), spec.dilation, pad, pad)?;
                g.chomp(y, pad)?
            }
        };
        h = g.relu(h);
        h = g.dropout(h, spec.dropout, spec.site + u as u64)?;
    }
    if g.shape(h) != g.shape(x) {
        return Err(Error::Input(format!("temporal block changes shape {:?} to {:?}", g.shape(x), g.shape(h))));
    }
    Ok(g.add(x, h)?)
}

/// `layer_norm(x + attention(x))` computed along channels, `x: [B, C, L]`.
pub fn cab_forward(
    g: &mut Graph,
    p: &Cab<Var>,
    x: Var,
    heads: usize,
    chunk: usize,
    dropout: f32,
    site: u64,
) -> Result<Var> {
    let xt = g.transpose_last2(x)?;
    let w = AttentionWeights {
        wq: p.wq,
        bq: Some(p.bq),
        wk: p.wk,
        bk: Some(p.bk),
        wv: p.wv,
        bv: Some(p.bv),
        wo: p.wo,
        bo: Some(p.bo),
    };
    let a = g.multi_head_chunked_attention(xt, &w, heads, chunk, dropout, site)?;
    let r = g.add(xt, a)?;
    let n = g.layer_norm(r, p.gain, p.shift, 1e-5)?;
    Ok(g.transpose_last2(n)?)
}

/// `α·ŷ_conv + (1−α)·ŷ_linear` with `α = σ(alpha_logit)`. The convolutional
/// head convolves the last `window` steps of `h: [B, C, L]` down to one step
/// and maps it to the outputs; the linear head maps the last step directly.
pub fn dhb_forward(g: &mut Graph, p: &Dhb<Var>, h: Var, window: usize) -> Result<Var> {
    let [batch, channels, len] = g.shape(h)[..] else {
        return Err(Error::Input(format!("output block input {:?} is not [B, C, L]", g.shape(h))));
    };
    if window == 0 || len < window {
        return Err(Error::Input(format!("sequence length {len} shorter than head window {window}")));
    }
    let tail = g.slice_last(h, len - window, window)?;
    let c = g.conv1d(tail, p.conv_w, Some(p.conv_b), 1, 0, 0)?;
    let c = g.reshape(c, &[batch, channels])?;
    let y_conv = g.linear(c, p.conv_out_w, Some(p.conv_out_b))?;
    let last = g.slice_last(h, len - 1, 1)?;
    let last = g.reshape(last, &[batch, channels])?;
    let y_linear = g.linear(last, p.linear_w, Some(p.linear_b))?;
    Ok(g.gate_mix(y_conv, y_linear, p.alpha_logit)?)
}
