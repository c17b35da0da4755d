//! Synthetic cycling fleet whose capacity fade drives the circuit parameters.
//!
//! Each cell follows `soh(t) = 1 − 0.2·(a·u + (1−a)·u²)`, `u = t / life`, so it
//! reaches 80% at cycle `life`. The fade level `f = 1 − soh` raises R0 and R1,
//! lowers C1 and V0. Cell-to-cell offsets in V0, R0 and test current make raw
//! terminal voltage a poor proxy for fade on its own.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_cell_csv, Cell, CycleRecord, Manifest, ManifestEntry, Split};
use crate::ecm::{simulate_thevenin, CurrentProfile, EcmParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub cells: usize,
    /// The first `train_cells` cells are marked for training, the rest for test.
    pub train_cells: usize,
    pub cycles: usize,
    pub seed: u64,
    /// Standard deviation of additive voltage noise, V.
    pub voltage_noise: f64,
    /// Sampling interval within a cycle, s.
    pub dt: f64,
    /// Range of cycles to 80% state of health.
    pub life: (f64, f64),
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self { cells: 10, train_cells: 8, cycles: 400, seed: 7, voltage_noise: 1e-3, dt: 2.0, life: (340.0, 470.0) }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.train_cells > self.cells || self.cycles < 2 {
            return Err(Error::Config(format!(
                "fleet needs at least one cell, train_cells ≤ cells and two cycles (got {}, {}, {})",
                self.cells, self.train_cells, self.cycles
            )));
        }
        if !(self.dt > 0.0 && self.voltage_noise >= 0.0 && self.life.0 > 0.0 && self.life.1 >= self.life.0) {
            return Err(Error::Config("fleet dt, noise and life range must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_id(&self, k: usize) -> String {
        format!("syn-{k:02}")
    }
}

/// A generated cell with the ground truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCell {
    pub cell: Cell,
    pub truth: Vec<EcmParams>,
    pub soh: Vec<f64>,
    pub split: Split,
}

/// Samples in one cycle: rest, two discharge pulses, rest.
const PHASES: [(usize, f64); 4] = [(5, 0.0), (40, 1.0), (25, 1.8), (30, 0.0)];

pub fn generate_fleet(cfg: &FleetConfig) -> Result<Vec<SynthCell>> {
    cfg.validate()?;
    (0..cfg.cells).map(|k| generate_cell(cfg, k)).collect()
}

fn generate_cell(cfg: &FleetConfig, k: usize) -> Result<SynthCell> {
    let mut rng = pace_nn::rng::keyed_rng(cfg.seed, 0x5eed_ce11, k as u64);
    let life = rng.gen_range(cfg.life.0..=cfg.life.1);
    let linear_share = rng.gen_range(0.15..0.6);
    let q0 = 1.1 * rng.gen_range(0.98..1.04);
    let v0b = rng.gen_range(3.05..3.2);
    let r0b = rng.gen_range(0.016..0.024);
    let r1b = 0.03 * rng.gen_range(0.98..1.02);
    let c1b = 1500.0 * rng.gen_range(0.98..1.02);
    let i_base = rng.gen_range(1.0..1.5);
    let t_ambient = 25.0 + rng.gen_range(-0.5..0.5);

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n_samples: usize = PHASES.iter().map(|p| p.0).sum();
    let timestamps: Vec<f64> = (0..n_samples).map(|s| s as f64 * cfg.dt).collect();

    let mut cycles = Vec::with_capacity(cfg.cycles);
    let mut truth = Vec::with_capacity(cfg.cycles);
    let mut soh_true = Vec::with_capacity(cfg.cycles);
    for t in 0..cfg.cycles {
        let u = t as f64 / life;
        let soh = 1.0 - 0.2 * (linear_share * u + (1.0 - linear_share) * u * u);
        let f = 1.0 - soh;
        let p = EcmParams::new(
            v0b - 0.05 * f + 0.002 * unit.sample(&mut rng),
            r0b * (1.0 + 0.3 * f) + 0.003 * (-(t as f64) / 10.0).exp(),
            r1b * (1.0 + 3.0 * f),
            c1b * (1.0 - 1.5 * f),
        )?;
        let i_cycle = i_base * (1.0 + 0.02 * unit.sample(&mut rng));
        let current: Vec<f64> =
            PHASES.iter().flat_map(|&(n, scale)| std::iter::repeat(scale * i_cycle).take(n)).collect();
        let profile = CurrentProfile::new(timestamps.clone(), current)?;
        let clean = simulate_thevenin(&p, &profile, 0.0)?;
        let voltage: Vec<f64> = clean.iter().map(|v| v + cfg.voltage_noise * unit.sample(&mut rng)).collect();

        let ambient = t_ambient + 0.3 * unit.sample(&mut rng);
        let mut temp = ambient;
        let temperature: Vec<f64> = profile
            .current()
            .iter()
            .map(|&i| {
                let heat = 15.0 * i * i * (p.r0 + p.r1);
                temp += (heat - (temp - ambient)) * cfg.dt / 200.0;
                temp + 0.1 * unit.sample(&mut rng)
            })
            .collect();

        cycles.push(CycleRecord {
            cell_id: cfg.cell_id(k),
            cycle_index: t as u32,
            timestamps: profile.timestamps().to_vec(),
            voltage,
            current: profile.current().to_vec(),
            temperature,
            discharge_capacity: q0 * soh * (1.0 + 5e-4 * unit.sample(&mut rng)),
        });
        truth.push(p);
        soh_true.push(soh);
    }
    Ok(SynthCell {
        cell: Cell { cell_id: cfg.cell_id(k), cycles },
        truth,
        soh: soh_true,
        split: if k < cfg.train_cells { Split::Train } else { Split::Test },
    })
}

/// Writes every cell's CSVs and a manifest into `dir`; returns the manifest path.
pub fn write_fleet(fleet: &[SynthCell], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut manifest = Manifest::default();
    for sc in fleet {
        let id = &sc.cell.cell_id;
        let ts = PathBuf::from(format!("{id}_timeseries.csv"));
        let sm = PathBuf::from(format!("{id}_summary.csv"));
        write_cell_csv(&sc.cell, &dir.join(&ts), &dir.join(&sm))?;
        manifest.cells.insert(id.clone(), ManifestEntry { timeseries: ts, summary: sm, split: sc.split });
    }
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
