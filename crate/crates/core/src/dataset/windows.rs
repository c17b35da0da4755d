use serde::{Deserialize, Serialize};

use super::{CycleFeatures, SohLabel, N_FEATURES};
use crate::error::{Error, Result};

/// `length` consecutive cycles of `width` features ending at `anchor_cycle`,
/// with the state of health 1..=targets.len() cycles ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub cell_id: String,
    pub anchor_cycle: u32,
    pub length: usize,
    pub width: usize,
    /// Row-major `length × width`.
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl FeatureWindow {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.features[t * self.width..(t + 1) * self.width]
    }

    /// Keeps only the listed feature columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> FeatureWindow {
        let features =
            (0..self.length).flat_map(|t| columns.iter().map(move |&c| self.features[t * self.width + c])).collect();
        FeatureWindow { features, width: columns.len(), ..self.clone() }
    }
}

/// Slides a window of `w` cycles over one cell. Anchors run from the `w`-th
/// cycle to the last one that still has `max_horizon` labelled successors.
/// A cell too short for a single window yields none.
pub fn build_windows(
    features: &[CycleFeatures],
    labels: &[SohLabel],
    w: usize,
    max_horizon: usize,
) -> Result<Vec<FeatureWindow>> {
    if w == 0 || max_horizon == 0 {
        return Err(Error::Config("window length and horizon must be positive".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Input(format!("{} feature rows but {} labels", features.len(), labels.len())));
    }
    let Some(first) = features.first() else {
        return Ok(Vec::new());
    };
    let cell_id = &first.cell_id;
    for (f, l) in features.iter().zip(labels) {
        if &f.cell_id != cell_id {
            return Err(Error::Input(format!("window source mixes cells {cell_id} and {}", f.cell_id)));
        }
        if f.cycle_index != l.cycle_index {
            return Err(Error::Input(format!(
                "cell {cell_id}: feature cycle {} aligned with label cycle {}",
                f.cycle_index, l.cycle_index
            )));
        }
    }
    let n = features.len();
    if n < w + max_horizon {
        log::warn!("cell {cell_id}: {n} cycles is too short for a window of {w} and horizon {max_horizon}; skipped");
        return Ok(Vec::new());
    }
    Ok((w - 1..n - max_horizon)
        .map(|a| FeatureWindow {
            cell_id: cell_id.clone(),
            anchor_cycle: features[a].cycle_index,
            length: w,
            width: N_FEATURES,
            features: features[a + 1 - w..=a].iter().flat_map(|r| r.values).collect(),
            targets: labels[a + 1..=a + max_horizon].iter().map(|l| l.soh).collect(),
        })
        .collect())
}
