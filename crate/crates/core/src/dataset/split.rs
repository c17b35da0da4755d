use std::collections::BTreeSet;

use super::{Cell, CycleFeatures, FeatureWindow};
use crate::error::{Error, Result};

/// Anything attributable to a single cell.
pub trait CellKeyed {
    fn cell_id(&self) -> &str;
}

impl CellKeyed for Cell {
    fn cell_id(&self) -> &str {
        &self.cell_id
    }
}

impl CellKeyed for FeatureWindow {
    fn cell_id(&self) -> &str {
        &self.cell_id
    }
}

impl CellKeyed for CycleFeatures {
    fn cell_id(&self) -> &str {
        &self.cell_id
    }
}

/// Partitions `items` by whole cell. Items of cells in neither list are dropped.
pub fn split_dataset<T: CellKeyed>(
    items: Vec<T>,
    train_ids: &[String],
    test_ids: &[String],
) -> Result<(Vec<T>, Vec<T>)> {
    let train: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
    if let Some(id) = train.intersection(&test).next() {
        return Err(Error::Input(format!("cell {id} is listed for both training and testing")));
    }
    let present: BTreeSet<&str> = items.iter().map(|i| i.cell_id()).collect();
    if let Some(id) = train.union(&test).find(|id| !present.contains(*id)) {
        return Err(Error::Input(format!("unknown cell id {id}")));
    }
    let (train_set, test_set): (BTreeSet<String>, BTreeSet<String>) =
        (train.iter().map(|s| s.to_string()).collect(), test.iter().map(|s| s.to_string()).collect());
    let mut tr = Vec::new();
    let mut te = Vec::new();
    for item in items {
        if train_set.contains(item.cell_id()) {
            tr.push(item);
        } else if test_set.contains(item.cell_id()) {
            te.push(item);
        }
    }
    Ok((tr, te))
}
