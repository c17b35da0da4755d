use serde::{Deserialize, Serialize};

use super::{Cell, CycleRecord};
use crate::ecm::CycleFit;
use crate::error::{Error, Result};

pub const N_FEATURES: usize = 8;

pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["mean_voltage", "mean_current", "max_temperature", "cycle_id", "v0", "r0", "r1", "c1"];

/// Columns holding identified circuit parameters.
pub const PHYSICS_COLUMNS: [usize; 4] = [4, 5, 6, 7];

/// Longest lifetime in the reference fleet; scales the cycle identifier into [0, 1].
pub const CYCLE_ID_SCALE: f64 = 2300.0;

const DISCHARGE_THRESHOLD: f64 = 1e-3;

/// The eight model inputs of one cycle, in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleFeatures {
    pub cell_id: String,
    pub cycle_index: u32,
    pub values: [f64; N_FEATURES],
}

/// Mean voltage and mean current over discharge samples, and peak
/// temperature over the whole cycle. A cycle with no discharge samples
/// averages over all of them.
pub fn cycle_summary(cycle: &CycleRecord) -> [f64; 3] {
    let discharging: Vec<usize> = (0..cycle.len()).filter(|&k| cycle.current[k] > DISCHARGE_THRESHOLD).collect();
    let idx: Vec<usize> = if discharging.is_empty() { (0..cycle.len()).collect() } else { discharging };
    let n = idx.len().max(1) as f64;
    let mean_v = idx.iter().map(|&k| cycle.voltage[k]).sum::<f64>() / n;
    let mean_i = idx.iter().map(|&k| cycle.current[k]).sum::<f64>() / n;
    let max_t = cycle.temperature.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean_v, mean_i, max_t]
}

/// Joins sensor summaries with per-cycle circuit fits.
pub fn assemble_features(cell: &Cell, fits: &[CycleFit]) -> Result<Vec<CycleFeatures>> {
    if fits.len() != cell.cycles.len() {
        return Err(Error::Input(format!(
            "cell {}: {} cycles but {} circuit fits",
            cell.cell_id,
            cell.cycles.len(),
            fits.len()
        )));
    }
    cell.cycles
        .iter()
        .zip(fits)
        .map(|(cycle, fit)| {
            if cycle.cycle_index != fit.cycle_index {
                return Err(Error::Input(format!(
                    "cell {}: cycle {} paired with fit for cycle {}",
                    cell.cell_id, cycle.cycle_index, fit.cycle_index
                )));
            }
            let [v, i, t] = cycle_summary(cycle);
            let p = fit.params;
            let values = [v, i, t, f64::from(cycle.cycle_index) / CYCLE_ID_SCALE, p.v0, p.r0, p.r1, p.c1];
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!(
                    "cell {} cycle {}: non-finite feature",
                    cell.cell_id, cycle.cycle_index
                )));
            }
            Ok(CycleFeatures { cell_id: cell.cell_id.clone(), cycle_index: cycle.cycle_index, values })
        })
        .collect()
}
