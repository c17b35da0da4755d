use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{error_stats, predict_windows};
use crate::dataset::{FeatureWindow, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

const PERMUTATION_SITE: u64 = 0x0009_e400;

/// Permutation importance of the checkpoint's input columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub features: Vec<String>,
    /// Error over all outputs with nothing shuffled.
    pub base_rmse: f64,
    /// `max(0, rmse_shuffled − base_rmse)` per feature.
    pub raw: Vec<f64>,
    /// Shares of the raw importances, summing to 100.
    pub percent: Vec<f64>,
    /// Every raw importance was zero; `percent` is uniform.
    pub uniform_fallback: bool,
}

/// Shuffles one input column at a time across windows, moving whole
/// column histories so every timestep of a window sees the same donor, and
/// measures the rise in RMSE over all horizons of the model.
pub fn permutation_importance(ckpt: &Checkpoint, windows: &[FeatureWindow], seed: u64) -> Result<Importance> {
    if windows.len() < 2 {
        return Err(Error::Input("permutation importance needs at least two windows".into()));
    }
    let score = |ws: &[FeatureWindow]| -> Result<f64> {
        let pred: Vec<f64> = predict_windows(ckpt, ws, true)?.into_iter().map(f64::from).collect();
        let h = ckpt.model.config().horizons.clone();
        let target: Vec<f64> = ws.iter().flat_map(|w| h.iter().map(move |&k| w.targets[k - 1])).collect();
        Ok(error_stats(&pred, &target)?.0)
    };
    let base_rmse = score(windows)?;
    let mut raw = Vec::with_capacity(ckpt.columns.len());
    for &col in &ckpt.columns {
        let mut perm: Vec<usize> = (0..windows.len()).collect();
        perm.shuffle(&mut pace_nn::rng::keyed_rng(seed, PERMUTATION_SITE, col as u64));
        let shuffled: Vec<FeatureWindow> = windows
            .iter()
            .zip(&perm)
            .map(|(w, &donor)| {
                let mut out = w.clone();
                let src = &windows[donor];
                for t in 0..w.length.min(src.length) {
                    out.features[t * w.width + col] = src.features[t * src.width + col];
                }
                out
            })
            .collect();
        raw.push((score(&shuffled)? - base_rmse).max(0.0));
    }
    let total: f64 = raw.iter().sum();
    let uniform_fallback = !(total > 0.0);
    let percent = if uniform_fallback {
        log::warn!("no feature raised the error when shuffled; reporting uniform importance");
        vec![100.0 / raw.len() as f64; raw.len()]
    } else {
        raw.iter().map(|r| r / total * 100.0).collect()
    };
    let features = ckpt
        .columns
        .iter()
        .map(|&c| FEATURE_NAMES.get(c).map_or_else(|| format!("column_{c}"), |s| s.to_string()))
        .collect();
    Ok(Importance { features, base_rmse, raw, percent, uniform_fallback })
}
