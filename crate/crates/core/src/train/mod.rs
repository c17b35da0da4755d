//! Training with early stopping, evaluation metrics, permutation importance
//! and ablation runs.

mod ablation;
mod importance;
mod metrics;

use std::collections::BTreeMap;
use std::io::Write;

use pace_nn::{AdamConfig, AdamState, Graph, GraphMode, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use ablation::{
    config_digest, run_ablation, run_experiment, write_metrics_csv, HorizonSummary, RunReport, SeedRun, Variant,
    METRICS_HEADER,
};
pub use importance::{permutation_importance, Importance};
pub use metrics::{efficiency, error_stats, evaluate, predict_windows, HorizonMetrics, Metrics};

use crate::dataset::{FeatureWindow, Normalizer, N_FEATURES};
use crate::error::{Error, Result};
use crate::fmt::f9;
use crate::model::{Checkpoint, ModelConfig, PaceModel};

pub const DEFAULT_SEEDS: [u64; 3] = [17, 42, 1234];

const SHUFFLE_SITE: u64 = 0x05ff_1e00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    /// Trailing share of each cell's training windows held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            lr: 1e-3,
            seeds: DEFAULT_SEEDS.to_vec(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience >= self.max_epochs {
            return bad(format!("need 0 < patience ({}) < max_epochs ({})", self.patience, self.max_epochs));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Set on the last epoch when early stopping ended the run.
    pub stopped: bool,
}

pub const HISTORY_HEADER: &str = "epoch,train_mse,val_mse,stopped";

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.epoch, f9(r.train_mse), f9(r.val_mse), r.stopped)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Model inputs of `windows`: normalized selected columns as `[n, W, F]`
/// and the targets at `horizons` as `[n, H]`.
pub fn encode_windows(
    windows: &[FeatureWindow],
    columns: &[usize],
    normalizer: &Normalizer,
    horizons: &[usize],
) -> Result<(Vec<f32>, Vec<f32>)> {
    if normalizer.width() != columns.len() {
        return Err(Error::Input(format!(
            "normalizer covers {} columns, model reads {}",
            normalizer.width(),
            columns.len()
        )));
    }
    let mut x = Vec::new();
    let mut y = Vec::with_capacity(windows.len() * horizons.len());
    for w in windows {
        if let Some(&c) = columns.iter().find(|&&c| c >= w.width) {
            return Err(Error::Input(format!("column {c} outside window width {}", w.width)));
        }
        for t in 0..w.length {
            let row = w.row(t);
            x.extend(
                columns.iter().enumerate().map(|(j, &c)| ((row[c] - normalizer.mean[j]) / normalizer.std[j]) as f32),
            );
        }
        for &h in horizons {
            let target = h.checked_sub(1).and_then(|i| w.targets.get(i)).ok_or_else(|| {
                Error::Config(format!("horizon {h} beyond the {} targets of each window", w.targets.len()))
            })?;
            y.push(*target as f32);
        }
    }
    Ok((x, y))
}

/// Statistics of the selected columns over `windows`.
pub fn fit_normalizer(windows: &[FeatureWindow], columns: &[usize]) -> Result<Normalizer> {
    let selected: Vec<FeatureWindow> = windows.iter().map(|w| w.select_columns(columns)).collect();
    Normalizer::fit(&selected)
}

/// Indices of training and validation windows: the last `val_fraction` of
/// every cell's windows by anchor cycle go to validation.
pub fn validation_split(windows: &[FeatureWindow], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by_cell: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_cell.entry(w.cell_id.as_str()).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_cell.values_mut() {
        idx.sort_by_key(|&i| windows[i].anchor_cycle);
        let n_val = (idx.len() as f64 * val_fraction).floor() as usize;
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    (train, val)
}

/// Adam on the model's parameters; one call of [`Trainer::step`] per batch.
pub struct Trainer {
    model: PaceModel,
    adam: AdamState,
    seed: u64,
}

impl Trainer {
    pub fn new(model: PaceModel, lr: f64) -> Self {
        let adam = AdamState::new(model.tensors(), AdamConfig { lr, ..AdamConfig::default() });
        let seed = model.seed();
        Self { model, adam, seed }
    }

    pub fn model(&self) -> &PaceModel {
        &self.model
    }

    pub fn into_model(self) -> PaceModel {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.adam.step_count()
    }

    /// Training-mode MSE of `x: [batch, W, F]` against `y: [batch, H]`, then
    /// one update. A non-finite loss leaves the parameters untouched.
    pub fn step(&mut self, x: &[f32], y: &[f32], batch: usize) -> Result<f64> {
        let cfg = self.model.config();
        let mut g = Graph::new(GraphMode::train(self.seed, self.adam.step_count()));
        let (p, vars) = self.model.bind_vars(&mut g, true);
        let xt = g.constant(Tensor::new(vec![batch, cfg.window, cfg.features], x.to_vec())?);
        let pred = self.model.forward(&mut g, &p, xt)?;
        let loss = g.mse_loss(pred, y)?;
        let value = f64::from(g.data(loss)[0]);
        if !value.is_finite() {
            return Ok(value);
        }
        g.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| g.take_grad(v)).collect();
        self.adam.step(self.model.tensors_mut(), &grads);
        Ok(value)
    }
}

fn val_mse(model: &PaceModel, x: &[f32], y: &[f32]) -> Result<f64> {
    let pred = model.predict(x, 64, false)?;
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (f64::from(*p) - f64::from(*t)).powi(2)).sum();
    Ok(sse / y.len() as f64)
}

/// Trains a fresh model built from `seed` on the unnormalized `windows`,
/// reading feature `columns`. Statistics are fitted on the training part of
/// the validation split and stored in the checkpoint.
pub fn train(
    model_cfg: &ModelConfig,
    columns: &[usize],
    windows: &[FeatureWindow],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if columns.len() != model_cfg.features || columns.iter().any(|&c| c >= N_FEATURES) {
        return Err(Error::Config(format!("columns {columns:?} do not match {} model features", model_cfg.features)));
    }
    if windows.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let (train_idx, val_idx) = validation_split(windows, cfg.val_fraction);
    if train_idx.is_empty() {
        return Err(Error::Input("no training windows left after the validation split".into()));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    let (train_w, val_w) = (pick(&train_idx), pick(&val_idx));
    let normalizer = fit_normalizer(&train_w, columns)?;
    let (x, y) = encode_windows(&train_w, columns, &normalizer, &model_cfg.horizons)?;
    let (vx, vy) = encode_windows(&val_w, columns, &normalizer, &model_cfg.horizons)?;
    if val_w.is_empty() {
        log::warn!("no validation windows; early stopping monitors the training loss");
    }
    let (per_x, per_y) = (model_cfg.window * model_cfg.features, model_cfg.n_outputs());

    let mut trainer = Trainer::new(PaceModel::build(model_cfg.clone(), seed)?, cfg.lr);
    let mut best = (f64::INFINITY, 0usize, trainer.model().tensors().to_vec());
    let mut history = Vec::new();
    let mut waited = 0;
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut bx = Vec::with_capacity(cfg.batch_size * per_x);
    let mut by = Vec::with_capacity(cfg.batch_size * per_y);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut pace_nn::rng::keyed_rng(seed, SHUFFLE_SITE, epoch as u64));
        let mut sse = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&x[i * per_x..(i + 1) * per_x]);
                by.extend_from_slice(&y[i * per_y..(i + 1) * per_y]);
            }
            let loss = trainer.step(&bx, &by, chunk.len())?;
            if !loss.is_finite() {
                let ids: Vec<String> = chunk
                    .iter()
                    .take(4)
                    .map(|&i| format!("{}@{}", train_w[i].cell_id, train_w[i].anchor_cycle))
                    .collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss} on {} windows starting {}", chunk.len(), ids.join(", ")),
                });
            }
            sse += loss * chunk.len() as f64;
        }
        let train_mse = sse / train_w.len() as f64;
        let val = if val_w.is_empty() { train_mse } else { val_mse(trainer.model(), &vx, &vy)? };
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0, detail: format!("validation loss {val}") });
        }
        if val < best.0 {
            best = (val, epoch, trainer.model().tensors().to_vec());
            waited = 0;
        } else {
            waited += 1;
        }
        let stopped = waited >= cfg.patience;
        log::info!("seed {seed} epoch {epoch}: train {train_mse:.3e} val {val:.3e}");
        history.push(EpochRecord { epoch, train_mse, val_mse: val, stopped });
        if stopped {
            break;
        }
    }
    let (best_val_mse, best_epoch, tensors) = best;
    let mut model = trainer.into_model();
    model.tensors_mut().clone_from_slice(&tensors);
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, normalizer: Some(normalizer), columns: columns.to_vec() },
        history,
        best_epoch,
        best_val_mse,
    })
}
