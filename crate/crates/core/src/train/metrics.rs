use serde::{Deserialize, Serialize};

use super::encode_windows;
use crate::dataset::{FeatureWindow, Normalizer};
use crate::error::{Error, Result};
use crate::model::{count_params_flops, Checkpoint};

/// Predictive performance per thousand parameters: `1000 / (rmse · params_k)`.
pub fn efficiency(rmse: f64, params_k: f64) -> Result<f64> {
    if !(rmse > 0.0 && rmse.is_finite() && params_k > 0.0 && params_k.is_finite()) {
        return Err(Error::Domain(format!(
            "efficiency needs positive finite inputs, got rmse {rmse} and {params_k}k parameters"
        )));
    }
    Ok(1000.0 / (rmse * params_k))
}

/// `(rmse, mae)` of paired series.
pub fn error_stats(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Input(format!("cannot score {} predictions against {} targets", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    /// On predictions clamped to the state-of-health range.
    pub rmse: f64,
    pub mae: f64,
    pub rmse_unclamped: f64,
    pub mae_unclamped: f64,
    /// `None` when the error is exactly zero.
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub horizons: Vec<HorizonMetrics>,
    pub param_count: usize,
    pub params_k: f64,
    pub macs: u64,
    pub flops: u64,
    pub mean_eta: Option<f64>,
    pub windows: usize,
}

impl Metrics {
    pub fn at(&self, horizon: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|m| m.horizon == horizon)
    }
}

/// Model outputs `[n, H]` for unnormalized `windows`, using the
/// checkpoint's columns and statistics.
pub fn predict_windows(ckpt: &Checkpoint, windows: &[FeatureWindow], clamp: bool) -> Result<Vec<f32>> {
    let cfg = ckpt.model.config();
    let normalizer = checkpoint_normalizer(ckpt)?;
    if let Some(w) = windows.iter().find(|w| w.length != cfg.window) {
        return Err(Error::Input(format!(
            "window of cell {} has {} cycles, the model reads {}",
            w.cell_id, w.length, cfg.window
        )));
    }
    let (x, _) = encode_windows(windows, &ckpt.columns, normalizer, &[])?;
    ckpt.model.predict(&x, 64, clamp)
}

fn checkpoint_normalizer(ckpt: &Checkpoint) -> Result<&Normalizer> {
    ckpt.normalizer.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint carries no normalization statistics".into()))
}

/// Per-horizon errors of the checkpoint on unnormalized `windows`, with the
/// model's size and cost.
pub fn evaluate(ckpt: &Checkpoint, windows: &[FeatureWindow], horizons: &[usize]) -> Result<Metrics> {
    let cfg = ckpt.model.config();
    let slots: Vec<usize> = horizons
        .iter()
        .map(|h| {
            cfg.horizons.iter().position(|m| m == h).ok_or_else(|| {
                Error::Config(format!("horizon {h} is not among the model's {} outputs", cfg.n_outputs()))
            })
        })
        .collect::<Result<_>>()?;
    if windows.is_empty() {
        return Err(Error::Input("no windows to evaluate".into()));
    }
    let raw = predict_windows(ckpt, windows, false)?;
    let h_all = cfg.n_outputs();
    let cost = count_params_flops(&ckpt.model);
    let params_k = cost.params as f64 / 1000.0;
    let mut out = Vec::with_capacity(horizons.len());
    for (&h, &slot) in horizons.iter().zip(&slots) {
        let target: Vec<f64> = windows
            .iter()
            .map(|w| {
                w.targets
                    .get(h - 1)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("window of cell {} has no target {h} cycles ahead", w.cell_id)))
            })
            .collect::<Result<_>>()?;
        let unclamped: Vec<f64> = (0..windows.len()).map(|i| f64::from(raw[i * h_all + slot])).collect();
        let clamped: Vec<f64> = (0..windows.len())
            .map(|i| f64::from(raw[i * h_all + slot].clamp(crate::model::SOH_CLAMP.0, crate::model::SOH_CLAMP.1)))
            .collect();
        let (rmse, mae) = error_stats(&clamped, &target)?;
        let (rmse_unclamped, mae_unclamped) = error_stats(&unclamped, &target)?;
        let eta = (rmse > 0.0).then(|| efficiency(rmse, params_k)).transpose()?;
        out.push(HorizonMetrics { horizon: h, rmse, mae, rmse_unclamped, mae_unclamped, eta });
    }
    let etas: Vec<f64> = out.iter().filter_map(|m| m.eta).collect();
    let mean_eta = (!etas.is_empty()).then(|| etas.iter().sum::<f64>() / etas.len() as f64);
    Ok(Metrics {
        horizons: out,
        param_count: cost.params,
        params_k,
        macs: cost.macs,
        flops: cost.flops,
        mean_eta,
        windows: windows.len(),
    })
}
