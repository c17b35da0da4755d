//! Online inference over a stream of sensor samples.
//!
//! Input lines are `timestamp_s,voltage_v,current_a,temperature_c,cycle_index`.
//! A cycle is complete when a sample of a later cycle arrives, or at end of
//! input. Each completed cycle is fitted, summarized into a feature row and
//! pushed into a ring of the last `window` rows; once the ring is full every
//! completed cycle produces one prediction line.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{cycle_summary, CycleRecord, FeatureWindow, CYCLE_ID_SCALE, N_FEATURES};
use crate::ecm::{CycleFitter, ExtractOptions};
use crate::error::{Error, Result};
use crate::fmt::f9;
use crate::model::Checkpoint;
use crate::train::predict_windows;

pub const STREAM_HEADER: &str = "timestamp_s,voltage_v,current_a,temperature_c,cycle_index";

const STREAM_CELL: &str = "stream";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamOptions {
    pub extract: ExtractOptions,
    /// Horizons reported on each prediction line.
    pub horizons: Vec<usize>,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self { extract: ExtractOptions::default(), horizons: vec![1, 30, 50] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub cycles: usize,
    pub predictions: usize,
    pub skipped_lines: usize,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    t: f64,
    v: f64,
    i: f64,
    temp: f64,
    cycle: u32,
}

fn parse_sample(line: &str) -> Option<Sample> {
    let mut fields = line.split(',').map(str::trim);
    let mut num = || fields.next()?.parse::<f64>().ok().filter(|x| x.is_finite());
    let (t, v, i, temp) = (num()?, num()?, num()?, num()?);
    let cycle = fields.next()?.parse::<u32>().ok()?;
    fields.next().is_none().then_some(Sample { t, v, i, temp, cycle })
}

/// Per-cycle state between completed cycles.
struct Streamer<'a> {
    ckpt: &'a Checkpoint,
    fitter: CycleFitter,
    rows: VecDeque<[f64; N_FEATURES]>,
    slots: Vec<usize>,
    summary: StreamSummary,
}

impl Streamer<'_> {
    fn finish_cycle<W: Write>(&mut self, cycle: CycleRecord, out: &mut W) -> Result<()> {
        let fit = self.fitter.fit_next(STREAM_CELL, &cycle)?;
        let [v, i, t] = cycle_summary(&cycle);
        let p = fit.params;
        let row = [v, i, t, f64::from(cycle.cycle_index) / CYCLE_ID_SCALE, p.v0, p.r0, p.r1, p.c1];
        let window = self.ckpt.model.config().window;
        if self.rows.len() == window {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
        self.summary.cycles += 1;
        let io = |e| Error::Stream(format!("write failed: {e}"));
        if self.rows.len() < window {
            writeln!(out, "{},warming_up", cycle.cycle_index).map_err(io)?;
        } else {
            let w = FeatureWindow {
                cell_id: STREAM_CELL.into(),
                anchor_cycle: cycle.cycle_index,
                length: window,
                width: N_FEATURES,
                features: self.rows.iter().flatten().copied().collect(),
                targets: Vec::new(),
            };
            let pred = predict_windows(self.ckpt, &[w], true)?;
            let mut line = cycle.cycle_index.to_string();
            for &s in &self.slots {
                line.push(',');
                line.push_str(&f9(f64::from(pred[s])));
            }
            writeln!(out, "{line}").map_err(io)?;
            self.summary.predictions += 1;
        }
        out.flush().map_err(io)
    }
}

/// Reads samples from `input` until end of stream and writes
/// `cycle_index,warming_up` or `cycle_index,soh_h…` lines to `out`.
/// Malformed lines, including a timestamp that does not increase within a
/// cycle, are skipped and counted; a cycle index that goes backwards is an
/// error.
pub fn stream_infer<R: BufRead, W: Write>(
    ckpt: &Checkpoint,
    input: R,
    mut out: W,
    opts: &StreamOptions,
) -> Result<StreamSummary> {
    let cfg = ckpt.model.config();
    if ckpt.normalizer.is_none() {
        return Err(Error::Checkpoint("checkpoint carries no normalization statistics".into()));
    }
    if ckpt.columns.iter().any(|&c| c >= N_FEATURES) {
        return Err(Error::Checkpoint(format!("checkpoint columns {:?} outside the feature table", ckpt.columns)));
    }
    let slots = opts
        .horizons
        .iter()
        .map(|h| {
            cfg.horizons.iter().position(|m| m == h).ok_or_else(|| {
                Error::Config(format!("horizon {h} is not among the model's {} outputs", cfg.n_outputs()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = Streamer {
        ckpt,
        fitter: CycleFitter::new(opts.extract)?,
        rows: VecDeque::with_capacity(cfg.window),
        slots,
        summary: StreamSummary::default(),
    };
    let mut current: Option<CycleRecord> = None;
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Stream(format!("read failed at line {}: {e}", n + 1)))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed == STREAM_HEADER {
            continue;
        }
        let Some(x) = parse_sample(trimmed) else {
            s.summary.skipped_lines += 1;
            log::warn!("line {}: malformed sample skipped", n + 1);
            continue;
        };
        if let Some(c) = &current {
            if x.cycle < c.cycle_index {
                return Err(Error::Stream(format!("line {}: cycle index {} after {}", n + 1, x.cycle, c.cycle_index)));
            }
            if x.cycle > c.cycle_index {
                let done = current.take().expect("checked above");
                s.finish_cycle(done, &mut out)?;
            } else if c.timestamps.last().is_some_and(|&t| x.t <= t) {
                s.summary.skipped_lines += 1;
                log::warn!("line {}: timestamp {} does not advance; skipped", n + 1, x.t);
                continue;
            }
        }
        let c = current.get_or_insert_with(|| CycleRecord {
            cell_id: STREAM_CELL.into(),
            cycle_index: x.cycle,
            timestamps: Vec::new(),
            voltage: Vec::new(),
            current: Vec::new(),
            temperature: Vec::new(),
            discharge_capacity: f64::NAN,
        });
        c.timestamps.push(x.t);
        c.voltage.push(x.v);
        c.current.push(x.i);
        c.temperature.push(x.temp);
    }
    if let Some(done) = current {
        s.finish_cycle(done, &mut out)?;
    }
    Ok(s.summary)
}

/// Writes the samples of `cycles` in the stream line format.
pub fn write_stream<W: Write>(mut w: W, cycles: &[CycleRecord]) -> std::io::Result<()> {
    for c in cycles {
        for k in 0..c.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.timestamps[k], c.voltage[k], c.current[k], c.temperature[k], c.cycle_index
            )?;
        }
    }
    Ok(())
}
