use serde::{Deserialize, Serialize};

use super::{ModelConfig, PaceModel};

/// Parameters and multiply-adds of one layer for a single window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

/// Size and forward cost of a model on one window (batch 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    /// Enumerated from the parameter tensors.
    pub params: usize,
    /// Multiply-adds.
    pub macs: u64,
    /// Two floating-point operations per multiply-add.
    pub flops: u64,
    /// Attention score slots per head, summed over attention blocks.
    pub attention_score_entries: u64,
    pub layers: Vec<LayerCost>,
}

/// Per-layer cost formulas, with `L = window`, `C = channels`, `k = kernel`,
/// `c = min(chunk, L)`, `H = outputs`:
///
/// | layer | params | multiply-adds |
/// |---|---|---|
/// | input projection | `F·C + C` | `L·F·C` |
/// | conv unit | `C·C·k + 2C` | `L·C·C·k + C·C·k` (conv + weight norm) |
/// | attention block | `4(C² + C) + 2C` | `4·L·C² + 2·L·c·C + 2·L·C` |
/// | conv head | `C·C·w + C + C·H + H` | `C·C·w + C·H` |
/// | linear head | `C·H + H` | `C·H` |
/// | gate | `1` | `2H` |
///
/// The attention row counts the Q/K/V/output projections, the scores, the
/// probability-weighted sum and the layer norm (two per element).
pub fn config_cost(cfg: &ModelConfig) -> Vec<LayerCost> {
    let (l, f, c, k, h) = (cfg.window, cfg.features, cfg.channels, cfg.kernel, cfg.n_outputs());
    let (l64, c64) = (l as u64, c as u64);
    let chunk = cfg.chunk.min(l) as u64;
    let mut layers = vec![LayerCost { name: "input".into(), params: f * c + c, macs: l64 * f as u64 * c64 }];
    for b in 0..cfg.dtb_count {
        for u in 0..cfg.units_per_dtb {
            layers.push(LayerCost {
                name: format!("dtb{b}.unit{u}"),
                params: c * c * k + 2 * c,
                macs: l64 * c64 * c64 * k as u64 + c64 * c64 * k as u64,
            });
        }
        if (b + 1) % cfg.cab_every == 0 {
            let j = (b + 1) / cfg.cab_every - 1;
            layers.push(LayerCost {
                name: format!("cab{j}"),
                params: 4 * (c * c + c) + 2 * c,
                macs: 4 * l64 * c64 * c64 + 2 * l64 * chunk * c64 + 2 * l64 * c64,
            });
        }
    }
    let w = cfg.conv_head_window;
    layers.push(LayerCost {
        name: "dhb.conv".into(),
        params: c * c * w + c + c * h + h,
        macs: (c * c * w + c * h) as u64,
    });
    layers.push(LayerCost { name: "dhb.linear".into(), params: c * h + h, macs: (c * h) as u64 });
    layers.push(LayerCost { name: "dhb.gate".into(), params: 1, macs: 2 * h as u64 });
    layers
}

pub fn count_params_flops(model: &PaceModel) -> ModelCost {
    let cfg = model.config();
    let layers = config_cost(cfg);
    let macs = layers.iter().map(|l| l.macs).sum();
    ModelCost {
        params: model.count_params(),
        macs,
        flops: 2 * macs,
        attention_score_entries: cfg.n_cabs() as u64 * pace_nn::attention_score_entries(cfg.window, cfg.chunk),
        layers,
    }
}

/// Steps of history visible to the last output of the convolutional stack:
/// `1 + Σ_units (k−1)·d`.
pub fn receptive_field(cfg: &ModelConfig) -> usize {
    1 + (0..cfg.dtb_count).map(|b| cfg.units_per_dtb * (cfg.kernel - 1) * cfg.dilation(b)).sum::<usize>()
}
