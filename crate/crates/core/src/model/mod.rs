//! The PACE forecaster: input projection, dilated temporal blocks with
//! interleaved chunked attention blocks, and a gated dual-head output.

mod blocks;
mod checkpoint;
mod cost;

use std::collections::BTreeMap;

use pace_nn::{Graph, GraphMode, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{cab_forward, dhb_forward, dtb_forward, Cab, ConvUnit, Dhb, Dtb, DtbSpec, Layout};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_MAGIC,
};
pub use cost::{config_cost, count_params_flops, receptive_field, LayerCost, ModelCost};

use crate::error::{Error, Result};

/// Lower and upper clamp applied to predictions in evaluation mode.
pub const SOH_CLAMP: (f32, f32) = (0.0, 1.05);

/// How causal alignment of the dilated convolutions is achieved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Left zero padding of `(k−1)·d`.
    #[default]
    Causal,
    /// `(k−1)·d` zeros on both sides, then the trailing steps are chomped.
    SymmetricChomp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub window: usize,
    pub features: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dtb_count: usize,
    pub units_per_dtb: usize,
    pub cab_every: usize,
    pub heads: usize,
    pub chunk: usize,
    pub conv_dropout: f32,
    pub attn_dropout: f32,
    pub horizons: Vec<usize>,
    pub conv_head_window: usize,
    pub alpha_init: f32,
    /// Initial bias of both output heads; predictions start near a fresh cell.
    pub output_bias_init: f32,
    pub padding: Padding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 100,
            features: 8,
            channels: 32,
            kernel: 3,
            dtb_count: 6,
            units_per_dtb: 2,
            cab_every: 2,
            heads: 8,
            chunk: 16,
            conv_dropout: 0.2,
            attn_dropout: 0.1,
            horizons: (1..=50).collect(),
            conv_head_window: 5,
            alpha_init: 0.5,
            output_bias_init: 1.0,
            padding: Padding::Causal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.window == 0 || self.features == 0 || self.channels == 0 || self.kernel == 0 {
            return bad("window, features, channels and kernel must be positive".into());
        }
        if self.dtb_count == 0 || self.units_per_dtb == 0 {
            return bad("need at least one temporal block with one unit".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.cab_every == 0 || self.dtb_count % self.cab_every != 0 {
            return bad(format!("dtb_count {} must be a multiple of cab_every {}", self.dtb_count, self.cab_every));
        }
        if self.chunk == 0 {
            return bad("chunk must be positive".into());
        }
        if self.horizons.is_empty() || self.horizons[0] == 0 || self.horizons.windows(2).any(|w| w[1] <= w[0]) {
            return bad("horizons must be non-empty, positive and strictly increasing".into());
        }
        if self.conv_head_window == 0 || self.conv_head_window > self.window {
            return bad(format!("conv head window {} must be in 1..={}", self.conv_head_window, self.window));
        }
        for (name, p) in [("conv_dropout", self.conv_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return bad(format!("alpha_init {} outside (0, 1)", self.alpha_init));
        }
        if !self.output_bias_init.is_finite() {
            return bad("output_bias_init must be finite".into());
        }
        Ok(())
    }

    pub fn n_cabs(&self) -> usize {
        self.dtb_count / self.cab_every
    }

    pub fn n_outputs(&self) -> usize {
        self.horizons.len()
    }

    pub fn max_horizon(&self) -> usize {
        *self.horizons.last().unwrap_or(&0)
    }

    /// Dilation shared by both units of temporal block `b`.
    pub fn dilation(&self, block: usize) -> usize {
        1 << block
    }
}

/// A built model: configuration, seed and named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PaceModel {
    config: ModelConfig,
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout<usize>,
}

struct Builder {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Const(f32),
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let mut rng = pace_nn::rng::keyed_rng(self.seed, name_key(&name), 0);
        let t = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
            Init::Const(c) => Tensor::full(shape, c),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Weight-normalized convolution whose effective weight starts equal to `v`.
    fn conv_unit(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> ConvUnit<usize> {
        let v = self.add(format!("{prefix}.weight_v"), &[c_out, c_in, k], Init::FanIn(c_in * k));
        let norms: Vec<f32> = self.tensors[v]
            .data()
            .chunks_exact(c_in * k)
            .map(|row| row.iter().map(|x| x * x).sum::<f32>().sqrt())
            .collect();
        self.names.push(format!("{prefix}.weight_g"));
        self.tensors.push(Tensor::new(vec![c_out], norms).expect("norm vector"));
        let g = self.tensors.len() - 1;
        let b = self.add(format!("{prefix}.bias"), &[c_out], Init::FanIn(c_in * k));
        ConvUnit { v, g, b }
    }
}

/// Stable 64-bit key of a parameter name (FNV-1a).
pub(crate) fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl PaceModel {
    /// Deterministic initialization from `seed`. Each tensor draws from its own
    /// stream keyed by its name.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (f, c, k, h) = (config.features, config.channels, config.kernel, config.n_outputs());
        let mut bld = Builder { seed, names: Vec::new(), tensors: Vec::new() };
        let input_w = bld.add("input.weight".into(), &[f, c], Init::FanIn(f));
        let input_b = bld.add("input.bias".into(), &[c], Init::FanIn(f));
        let dtbs = (0..config.dtb_count)
            .map(|b| Dtb {
                units: (0..config.units_per_dtb).map(|u| bld.conv_unit(&format!("dtb{b}.unit{u}"), c, c, k)).collect(),
            })
            .collect();
        let cabs = (0..config.n_cabs())
            .map(|j| {
                let mut lin = |name: &str| {
                    let w = bld.add(format!("cab{j}.{name}.weight"), &[c, c], Init::FanIn(c));
                    let b = bld.add(format!("cab{j}.{name}.bias"), &[c], Init::FanIn(c));
                    (w, b)
                };
                let (wq, bq) = lin("query");
                let (wk, bk) = lin("key");
                let (wv, bv) = lin("value");
                let (wo, bo) = lin("out");
                let gain = bld.add(format!("cab{j}.norm.gain"), &[c], Init::Const(1.0));
                let shift = bld.add(format!("cab{j}.norm.shift"), &[c], Init::Const(0.0));
                Cab { wq, bq, wk, bk, wv, bv, wo, bo, gain, shift }
            })
            .collect();
        let win = config.conv_head_window;
        let dhb = Dhb {
            conv_w: bld.add("dhb.conv.weight".into(), &[c, c, win], Init::FanIn(c * win)),
            conv_b: bld.add("dhb.conv.bias".into(), &[c], Init::FanIn(c * win)),
            conv_out_w: bld.add("dhb.conv_out.weight".into(), &[c, h], Init::FanIn(c)),
            conv_out_b: bld.add("dhb.conv_out.bias".into(), &[h], Init::Const(config.output_bias_init)),
            linear_w: bld.add("dhb.linear.weight".into(), &[c, h], Init::FanIn(c)),
            linear_b: bld.add("dhb.linear.bias".into(), &[h], Init::Const(config.output_bias_init)),
            alpha_logit: {
                let a = config.alpha_init;
                bld.add("dhb.alpha_logit".into(), &[1], Init::Const((a / (1.0 - a)).ln()))
            },
        };
        let layout = Layout { input_w, input_b, dtbs, cabs, dhb };
        Ok(Self { config, seed, names: bld.names, tensors: bld.tensors, layout })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against a fresh build of `config`.
    pub fn from_tensors(config: ModelConfig, seed: u64, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(config, seed)?;
        if named.len() != model.names.len() {
            return Err(Error::Checkpoint(format!("{} tensors stored, model has {}", named.len(), model.names.len())));
        }
        for (k, (name, t)) in named.into_iter().enumerate() {
            if name != model.names[k] || t.shape() != model.tensors[k].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {k}: stored `{name}` {:?}, expected `{}` {:?}",
                    t.shape(),
                    model.names[k],
                    model.tensors[k].shape()
                )));
            }
            model.tensors[k] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn layout(&self) -> &Layout<usize> {
        &self.layout
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|k| &self.tensors[k])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |k| &mut self.tensors[k])
    }

    pub fn named_params(&self) -> BTreeMap<&str, &Tensor> {
        self.names.iter().map(String::as_str).zip(&self.tensors).collect()
    }

    pub fn count_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// The gate `α = σ(alpha_logit)`.
    pub fn alpha(&self) -> f32 {
        pace_nn::sigmoid(self.tensors[self.layout.dhb.alpha_logit].data()[0])
    }

    /// Places every parameter on `g`; trainable ones receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Layout<Var> {
        self.bind_vars(g, trainable).0
    }

    /// Like [`bind`](Self::bind), also returning the variables in tensor order.
    pub fn bind_vars(&self, g: &mut Graph, trainable: bool) -> (Layout<Var>, Vec<Var>) {
        let vars: Vec<Var> =
            self.tensors.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
        (self.layout.map(&|i| vars[i]), vars)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let shape = g.shape(x);
        match shape {
            [b, w, f] if *w == self.config.window && *f == self.config.features => {
                if !g.value(x).is_finite() {
                    return Err(Error::Input("non-finite model input".into()));
                }
                Ok(*b)
            }
            _ => Err(Error::Input(format!(
                "model input shape {shape:?}, expected [B, {}, {}]",
                self.config.window, self.config.features
            ))),
        }
    }

    fn dtb_spec(&self, block: usize) -> DtbSpec {
        DtbSpec {
            dilation: self.config.dilation(block),
            padding: self.config.padding,
            dropout: self.config.conv_dropout,
            site: 0x0d7b_0000 + block as u64 * 16,
        }
    }

    /// Input projection and the temporal stack up to the last attention
    /// block: `[B, W, F] → [B, C, W]`. With `with_attention` false the
    /// attention blocks are skipped (identity).
    pub fn encode(&self, g: &mut Graph, p: &Layout<Var>, x: Var, with_attention: bool) -> Result<Var> {
        self.check_input(g, x)?;
        let h = g.linear(x, p.input_w, Some(p.input_b))?;
        let mut h = g.transpose_last2(h)?;
        for (b, dtb) in p.dtbs.iter().enumerate() {
            h = dtb_forward(g, dtb, h, &self.dtb_spec(b))?;
            if with_attention && (b + 1) % self.config.cab_every == 0 {
                let j = (b + 1) / self.config.cab_every - 1;
                h = cab_forward(
                    g,
                    &p.cabs[j],
                    h,
                    self.config.heads,
                    self.config.chunk,
                    self.config.attn_dropout,
                    0x0cab_0000 + j as u64,
                )?;
            }
        }
        Ok(h)
    }

    /// Unclamped predictions `[B, H]` for `x: [B, W, F]`.
    pub fn forward(&self, g: &mut Graph, p: &Layout<Var>, x: Var) -> Result<Var> {
        let h = self.encode(g, p, x, true)?;
        dhb_forward(g, &p.dhb, h, self.config.conv_head_window)
    }

    /// Evaluation-mode predictions for row-major windows `[n, W, F]`,
    /// processed `batch` at a time. Clamped to [`SOH_CLAMP`] when `clamp`.
    pub fn predict(&self, x: &[f32], batch: usize, clamp: bool) -> Result<Vec<f32>> {
        let per = self.config.window * self.config.features;
        if per == 0 || x.len() % per != 0 {
            return Err(Error::Input(format!("input length {} is not a multiple of {per}", x.len())));
        }
        let n = x.len() / per;
        let batch = batch.max(1);
        let mut out = Vec::with_capacity(n * self.config.n_outputs());
        for start in (0..n).step_by(batch) {
            let b = batch.min(n - start);
            let mut g = Graph::new(GraphMode::eval());
            let p = self.bind(&mut g, false);
            let xt = Tensor::new(
                vec![b, self.config.window, self.config.features],
                x[start * per..(start + b) * per].to_vec(),
            )?;
            let xv = g.constant(xt);
            let y = self.forward(&mut g, &p, xv)?;
            out.extend_from_slice(g.data(y));
        }
        if clamp {
            out.iter_mut().for_each(|v| *v = v.clamp(SOH_CLAMP.0, SOH_CLAMP.1));
        }
        Ok(out)
    }
}
