//! Cell records, manifest loading, labels, windows, normalization and splits.

mod features;
mod io;
mod normalize;
mod split;
mod windows;

use serde::{Deserialize, Serialize};

pub use features::{
    assemble_features, cycle_summary, CycleFeatures, CYCLE_ID_SCALE, FEATURE_NAMES, N_FEATURES, PHYSICS_COLUMNS,
};
pub use io::{load_cells, write_cell_csv, CellCollection, Manifest, ManifestEntry, Split};
pub use normalize::{normalize, Normalizer};
pub use split::{split_dataset, CellKeyed};
pub use windows::{build_windows, FeatureWindow};

use crate::error::{Error, Result};

/// One charge/discharge cycle sampled in time. Positive current is discharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cell_id: String,
    pub cycle_index: u32,
    pub timestamps: Vec<f64>,
    pub voltage: Vec<f64>,
    pub current: Vec<f64>,
    pub temperature: Vec<f64>,
    pub discharge_capacity: f64,
}

impl CycleRecord {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.timestamps.len();
        if self.voltage.len() != n || self.current.len() != n || self.temperature.len() != n {
            return Err(Error::Input(format!(
                "cell {} cycle {}: channel lengths differ",
                self.cell_id, self.cycle_index
            )));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!(
                "cell {} cycle {}: timestamps not strictly increasing",
                self.cell_id, self.cycle_index
            )));
        }
        Ok(())
    }
}

/// A cell's cycles, ordered by cycle index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: String,
    pub cycles: Vec<CycleRecord>,
}

/// State of health of one cycle relative to the cell's first cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SohLabel {
    pub cycle_index: u32,
    pub soh: f64,
}

/// Upper bound beyond which a label is treated as a data error.
pub const SOH_MAX: f64 = 1.05;

/// `SoH_t = Q_t / Q_first`, taking the first cycle present as reference.
pub fn compute_soh(cell: &Cell) -> Result<Vec<SohLabel>> {
    let first = cell.cycles.first().ok_or_else(|| Error::Input(format!("cell {} has no cycles", cell.cell_id)))?;
    let q0 = first.discharge_capacity;
    if !(q0.is_finite() && q0 > 0.0) {
        return Err(Error::Domain(format!("cell {}: reference capacity {q0} is not positive", cell.cell_id)));
    }
    cell.cycles
        .iter()
        .map(|c| {
            let soh = c.discharge_capacity / q0;
            if !soh.is_finite() || soh <= 0.0 || soh > SOH_MAX {
                return Err(Error::Input(format!(
                    "cell {} cycle {}: state of health {soh} outside (0, {SOH_MAX}]",
                    cell.cell_id, c.cycle_index
                )));
            }
            Ok(SohLabel { cycle_index: c.cycle_index, soh })
        })
        .collect()
}
