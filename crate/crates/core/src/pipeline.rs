//! Cells to model-ready windows: circuit fits, feature rows, labels, windows.

use std::io::Write;
use std::path::Path;

use crate::dataset::{
    assemble_features, build_windows, compute_soh, Cell, CellCollection, CycleFeatures, FeatureWindow, SohLabel, Split,
    FEATURE_NAMES, N_FEATURES,
};
use crate::ecm::{extract_cycle_features, CycleFit, ExtractOptions};
use crate::error::{Error, Result};
use crate::fmt::f9;

/// Feature rows and labels of one cell, aligned by cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    pub cell_id: String,
    pub split: Option<Split>,
    pub features: Vec<CycleFeatures>,
    pub labels: Vec<SohLabel>,
    pub fits: Vec<CycleFit>,
}

pub fn cell_table(cell: &Cell, split: Option<Split>, extract: &ExtractOptions) -> Result<CellTable> {
    let fits = extract_cycle_features(cell, extract)?;
    let features = assemble_features(cell, &fits)?;
    let labels = compute_soh(cell)?;
    Ok(CellTable { cell_id: cell.cell_id.clone(), split, features, labels, fits })
}

/// Tables of every manifest cell, in cell-id order.
pub fn collection_tables(cells: &CellCollection, extract: &ExtractOptions) -> Result<Vec<CellTable>> {
    cells
        .cells
        .iter()
        .map(|cell| {
            let split = cells.manifest.cells.get(&cell.cell_id).map(|e| e.split);
            cell_table(cell, split, extract)
        })
        .collect()
}

/// Unnormalized windows of the training and test cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowSets {
    pub train: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
}

pub fn window_sets(tables: &[CellTable], window: usize, max_horizon: usize) -> Result<WindowSets> {
    let mut sets = WindowSets::default();
    for t in tables {
        let windows = build_windows(&t.features, &t.labels, window, max_horizon)?;
        match t.split {
            Some(Split::Train) => sets.train.extend(windows),
            Some(Split::Test) => sets.test.extend(windows),
            None => log::warn!("cell {} has no split assignment; skipped", t.cell_id),
        }
    }
    Ok(sets)
}

pub const PREPARED_HEADER: &str =
    "cell_id,split,cycle_index,mean_voltage,mean_current,max_temperature,cycle_id,v0,r0,r1,c1,soh";

/// One row per cycle under [`PREPARED_HEADER`].
pub fn write_prepared<W: Write>(mut w: W, tables: &[CellTable]) -> std::io::Result<()> {
    writeln!(w, "{PREPARED_HEADER}")?;
    for t in tables {
        let split = match t.split {
            Some(Split::Train) => "train",
            Some(Split::Test) => "test",
            None => "",
        };
        for (f, l) in t.features.iter().zip(&t.labels) {
            write!(w, "{},{split},{}", t.cell_id, f.cycle_index)?;
            for v in f.values.iter().chain([&l.soh]) {
                write!(w, ",{}", f9(*v))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Reads a prepared table back; circuit-fit diagnostics are not stored, so
/// `fits` comes back empty.
pub fn read_prepared(path: &Path) -> Result<Vec<CellTable>> {
    let parse_err = |line: u64, column: &str, message: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        column: column.to_string(),
        message,
    };
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(std::io::BufReader::new(file));
    let header: Vec<String> =
        reader.headers().map_err(|e| parse_err(1, "header", e.to_string()))?.iter().map(str::to_string).collect();
    if header.join(",") != PREPARED_HEADER {
        return Err(parse_err(1, "header", format!("expected `{PREPARED_HEADER}`")));
    }
    let mut tables: Vec<CellTable> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, "row", e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let split = match field(1) {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "" => None,
            other => return Err(parse_err(line, "split", format!("unknown split `{other}`"))),
        };
        let cycle_index: u32 = field(2).parse().map_err(|e| parse_err(line, "cycle_index", format!("{e}")))?;
        let mut values = [0.0; N_FEATURES];
        for (j, v) in values.iter_mut().enumerate() {
            *v = field(3 + j).parse().map_err(|e| parse_err(line, FEATURE_NAMES[j], format!("{e}")))?;
        }
        let soh: f64 = field(3 + N_FEATURES).parse().map_err(|e| parse_err(line, "soh", format!("{e}")))?;
        let cell_id = field(0).to_string();
        if tables.last().is_none_or(|t| t.cell_id != cell_id) {
            if tables.iter().any(|t| t.cell_id == cell_id) {
                return Err(parse_err(line, "cell_id", format!("rows of cell {cell_id} are not contiguous")));
            }
            tables.push(CellTable { cell_id: cell_id.clone(), split, features: vec![], labels: vec![], fits: vec![] });
        }
        let t = tables.last_mut().expect("pushed above");
        if t.features.last().is_some_and(|f| f.cycle_index >= cycle_index) {
            return Err(parse_err(line, "cycle_index", "cycles must increase within a cell".into()));
        }
        t.features.push(CycleFeatures { cell_id, cycle_index, values });
        t.labels.push(SohLabel { cycle_index, soh });
    }
    Ok(tables)
}
