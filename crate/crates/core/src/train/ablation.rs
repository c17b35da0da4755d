use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{efficiency, evaluate, Metrics};
use super::{train, EpochRecord, TrainConfig};
use crate::dataset::{FeatureWindow, N_FEATURES, PHYSICS_COLUMNS};
use crate::error::{Error, Result};
use crate::model::{count_params_flops, Checkpoint, ModelConfig, PaceModel};

/// A model configuration derived from the base one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    /// Circuit-parameter columns removed; the input projection shrinks.
    NoPhysics,
    /// One attention head, chunking kept.
    SingleHead,
    /// Chunk as long as the window.
    FullAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::NoPhysics, Variant::SingleHead, Variant::FullAttention];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NoPhysics => "no_physics",
            Variant::SingleHead => "single_head",
            Variant::FullAttention => "full_attention",
        }
    }

    /// Model configuration and input columns of the variant.
    pub fn apply(self, base: &ModelConfig) -> (ModelConfig, Vec<usize>) {
        let mut cfg = base.clone();
        let mut columns: Vec<usize> = (0..N_FEATURES).collect();
        match self {
            Variant::Base => {}
            Variant::NoPhysics => columns.retain(|c| !PHYSICS_COLUMNS.contains(c)),
            Variant::SingleHead => cfg.heads = 1,
            Variant::FullAttention => cfg.chunk = cfg.window,
        }
        cfg.features = columns.len();
        (cfg, columns)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant `{s}`; expected one of base, no_physics, single_head, full_attention"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Seed mean and population standard deviation at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Efficiency of the mean RMSE; `None` if that is zero.
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    /// Hash of everything that defines the experiment except the seeds.
    pub config_digest: String,
    pub model: ModelConfig,
    pub columns: Vec<usize>,
    pub train: TrainConfig,
    pub runs: Vec<SeedRun>,
    pub summary: Vec<HorizonSummary>,
    pub param_count: usize,
    pub params_k: f64,
    pub macs: u64,
    pub flops: u64,
    pub attention_score_entries: u64,
    pub mean_eta: Option<f64>,
}

impl RunReport {
    pub fn at(&self, horizon: usize) -> Option<&HorizonSummary> {
        self.summary.iter().find(|s| s.horizon == horizon)
    }
}

/// Hex SHA-256 of the model configuration, columns and training settings
/// with the seeds left out, so runs that differ only by seed share it.
pub fn config_digest(model: &ModelConfig, columns: &[usize], train: &TrainConfig) -> String {
    let unseeded = TrainConfig { seeds: Vec::new(), ..train.clone() };
    let json = serde_json::json!({ "model": model, "columns": columns, "train": unseeded });
    let digest = Sha256::digest(json.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains the variant once per configured seed on `train_windows` and
/// evaluates each run on `test_windows` at `horizons`. Checkpoints are
/// returned in seed order.
pub fn run_experiment(
    variant: Variant,
    base: &ModelConfig,
    train_windows: &[FeatureWindow],
    test_windows: &[FeatureWindow],
    cfg: &TrainConfig,
    horizons: &[usize],
) -> Result<(RunReport, Vec<Checkpoint>)> {
    cfg.validate()?;
    let (model, columns) = variant.apply(base);
    model.validate()?;
    let cost = count_params_flops(&PaceModel::build(model.clone(), 0)?);
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut checkpoints = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("{variant}: training seed {seed}");
        let outcome = train(&model, &columns, train_windows, cfg, seed)?;
        let metrics = evaluate(&outcome.checkpoint, test_windows, horizons)?;
        runs.push(SeedRun { seed, metrics, history: outcome.history, best_epoch: outcome.best_epoch });
        checkpoints.push(outcome.checkpoint);
    }
    let params_k = cost.params as f64 / 1000.0;
    let mut summary = Vec::with_capacity(horizons.len());
    for (i, &h) in horizons.iter().enumerate() {
        let rmse: Vec<f64> = runs.iter().map(|r| r.metrics.horizons[i].rmse).collect();
        let mae: Vec<f64> = runs.iter().map(|r| r.metrics.horizons[i].mae).collect();
        let (rmse_mean, rmse_std) = mean_std(&rmse);
        let (mae_mean, mae_std) = mean_std(&mae);
        let eta = (rmse_mean > 0.0).then(|| efficiency(rmse_mean, params_k)).transpose()?;
        summary.push(HorizonSummary { horizon: h, rmse_mean, rmse_std, mae_mean, mae_std, eta });
    }
    let etas: Vec<f64> = summary.iter().filter_map(|s| s.eta).collect();
    let mean_eta = (!etas.is_empty()).then(|| etas.iter().sum::<f64>() / etas.len() as f64);
    let report = RunReport {
        variant,
        config_digest: config_digest(&model, &columns, cfg),
        model,
        columns,
        train: cfg.clone(),
        runs,
        summary,
        param_count: cost.params,
        params_k,
        macs: cost.macs,
        flops: cost.flops,
        attention_score_entries: cost.attention_score_entries,
        mean_eta,
    };
    Ok((report, checkpoints))
}

/// Base and variant trained on the same data with the same seeds.
pub fn run_ablation(
    base: &ModelConfig,
    variant: Variant,
    train_windows: &[FeatureWindow],
    test_windows: &[FeatureWindow],
    cfg: &TrainConfig,
    horizons: &[usize],
) -> Result<(RunReport, RunReport)> {
    if variant == Variant::Base {
        return Err(Error::Config("an ablation compares the base model with another variant".into()));
    }
    let (b, _) = run_experiment(Variant::Base, base, train_windows, test_windows, cfg, horizons)?;
    let (v, _) = run_experiment(variant, base, train_windows, test_windows, cfg, horizons)?;
    Ok((b, v))
}

pub const METRICS_HEADER: &str = "variant,params_k,flops_m,h,rmse,mae,eta";

/// Seed-mean metrics, one row per report and horizon. `flops_m` counts one
/// operation per multiply-add, in millions.
pub fn write_metrics_csv<W: Write>(mut w: W, reports: &[RunReport]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in reports {
        for s in &r.summary {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.variant,
                r.params_k,
                r.macs as f64 / 1e6,
                s.horizon,
                s.rmse_mean,
                s.mae_mean,
                s.eta.map_or(String::new(), |e| e.to_string())
            )?;
        }
    }
    Ok(())
}
