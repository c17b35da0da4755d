use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cell, CycleRecord};
use crate::error::{Error, Result};
use crate::fmt::f9;

pub const TIMESERIES_HEADER: [&str; 5] = ["cycle_index", "timestamp_s", "voltage_v", "current_a", "temperature_c"];
pub const SUMMARY_HEADER: [&str; 2] = ["cycle_index", "discharge_capacity_ah"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub timeseries: PathBuf,
    pub summary: PathBuf,
    pub split: Split,
}

/// `cell_id → files`. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub cells: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: malformed manifest: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.cells.iter().filter(|(_, e)| e.split == split).map(|(id, _)| id.clone()).collect()
    }
}

/// Cells loaded from a manifest, ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCollection {
    pub cells: Vec<Cell>,
    pub manifest: Manifest,
}

impl CellCollection {
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.manifest.ids(split)
    }

    pub fn get(&self, cell_id: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.cell_id == cell_id)
    }
}

pub fn load_cells(manifest_path: &Path) -> Result<CellCollection> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let cells = manifest
        .cells
        .iter()
        .map(|(id, entry)| load_cell(id, &base.join(&entry.timeseries), &base.join(&entry.summary)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellCollection { cells, manifest })
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            column: "header".into(),
            message: format!("expected `{}`", expected.join(",")),
        });
    }
    Ok(reader)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { file: path.to_path_buf(), line, column: String::new(), message: e.to_string() }
}

struct RowParser<'a> {
    path: &'a Path,
    header: &'a [&'a str],
    record: csv::StringRecord,
}

impl RowParser<'_> {
    fn line(&self) -> u64 {
        self.record.position().map_or(0, |p| p.line())
    }

    fn field<T: std::str::FromStr>(&self, col: usize) -> Result<T> {
        let raw = self.record.get(col).unwrap_or("");
        raw.parse::<T>().map_err(|_| Error::Parse {
            file: self.path.to_path_buf(),
            line: self.line(),
            column: self.header[col].to_string(),
            message: format!("cannot parse `{raw}`"),
        })
    }

    fn finite(&self, col: usize) -> Result<f64> {
        let v: f64 = self.field(col)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Parse {
                file: self.path.to_path_buf(),
                line: self.line(),
                column: self.header[col].to_string(),
                message: "value is not finite".into(),
            })
        }
    }
}

fn load_cell(cell_id: &str, timeseries: &Path, summary: &Path) -> Result<Cell> {
    let mut cycles: BTreeMap<u32, CycleRecord> = BTreeMap::new();
    let mut current: Option<u32> = None;
    let mut reader = open_csv(timeseries, &TIMESERIES_HEADER)?;
    for record in reader.records() {
        let row = RowParser {
            path: timeseries,
            header: &TIMESERIES_HEADER,
            record: record.map_err(|e| csv_error(timeseries, e))?,
        };
        let cycle: u32 = row.field(0)?;
        if current != Some(cycle) {
            if cycles.contains_key(&cycle) {
                return Err(Error::DuplicateCycle { cell: cell_id.to_string(), cycle });
            }
            current = Some(cycle);
        }
        let rec = cycles.entry(cycle).or_insert_with(|| CycleRecord {
            cell_id: cell_id.to_string(),
            cycle_index: cycle,
            timestamps: Vec::new(),
            voltage: Vec::new(),
            current: Vec::new(),
            temperature: Vec::new(),
            discharge_capacity: f64::NAN,
        });
        let t = row.finite(1)?;
        if rec.timestamps.last().is_some_and(|&prev| t <= prev) {
            return Err(Error::Parse {
                file: timeseries.to_path_buf(),
                line: row.line(),
                column: TIMESERIES_HEADER[1].into(),
                message: "timestamps must increase within a cycle".into(),
            });
        }
        rec.timestamps.push(t);
        rec.voltage.push(row.finite(2)?);
        rec.current.push(row.finite(3)?);
        rec.temperature.push(row.finite(4)?);
    }

    let mut seen = BTreeMap::new();
    let mut reader = open_csv(summary, &SUMMARY_HEADER)?;
    for record in reader.records() {
        let row =
            RowParser { path: summary, header: &SUMMARY_HEADER, record: record.map_err(|e| csv_error(summary, e))? };
        let cycle: u32 = row.field(0)?;
        let q = row.finite(1)?;
        if q < 0.0 {
            return Err(Error::Parse {
                file: summary.to_path_buf(),
                line: row.line(),
                column: SUMMARY_HEADER[1].into(),
                message: "capacity must be non-negative".into(),
            });
        }
        if seen.insert(cycle, ()).is_some() {
            return Err(Error::DuplicateCycle { cell: cell_id.to_string(), cycle });
        }
        match cycles.get_mut(&cycle) {
            Some(rec) => rec.discharge_capacity = q,
            None => return Err(Error::Input(format!("{}: cycle {cycle} has no time series", summary.display()))),
        }
    }
    if let Some(missing) = cycles.values().find(|c| c.discharge_capacity.is_nan()) {
        return Err(Error::Input(format!("{}: no capacity for cycle {}", summary.display(), missing.cycle_index)));
    }
    Ok(Cell { cell_id: cell_id.to_string(), cycles: cycles.into_values().collect() })
}

/// Writes a cell's time series and summary CSVs.
pub fn write_cell_csv(cell: &Cell, timeseries: &Path, summary: &Path) -> Result<()> {
    let mut ts = std::io::BufWriter::new(File::create(timeseries).map_err(Error::io(timeseries))?);
    let mut body = || -> std::io::Result<()> {
        writeln!(ts, "{}", TIMESERIES_HEADER.join(","))?;
        for c in &cell.cycles {
            for k in 0..c.len() {
                writeln!(
                    ts,
                    "{},{},{},{},{}",
                    c.cycle_index,
                    f9(c.timestamps[k]),
                    f9(c.voltage[k]),
                    f9(c.current[k]),
                    f9(c.temperature[k])
                )?;
            }
        }
        ts.flush()
    };
    body().map_err(Error::io(timeseries))?;

    let mut sm = std::io::BufWriter::new(File::create(summary).map_err(Error::io(summary))?);
    let mut body = || -> std::io::Result<()> {
        writeln!(sm, "{}", SUMMARY_HEADER.join(","))?;
        for c in &cell.cycles {
            writeln!(sm, "{},{}", c.cycle_index, f9(c.discharge_capacity))?;
        }
        sm.flush()
    };
    body().map_err(Error::io(summary))
}
