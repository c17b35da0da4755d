//! First-order Thevenin equivalent circuit: simulation, Levenberg–Marquardt
//! identification and per-cycle parameter extraction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Cell, CycleRecord};
use crate::error::{Error, Result};

/// Minimum number of samples a fit will accept.
pub const MIN_FIT_SAMPLES: usize = 8;

/// Current magnitude above which a sample counts as discharging or charging.
const CURRENT_THRESHOLD: f64 = 1e-3;

/// Open-circuit voltage, ohmic resistance and one RC pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcmParams {
    pub v0: f64,
    pub r0: f64,
    pub r1: f64,
    pub c1: f64,
}

impl EcmParams {
    pub fn new(v0: f64, r0: f64, r1: f64, c1: f64) -> Result<Self> {
        let p = Self { v0, r0, r1, c1 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("v0", self.v0), ("r0", self.r0), ("r1", self.r1), ("c1", self.c1)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} = {v} must be finite and positive")));
            }
        }
        Ok(())
    }

    /// Positive, finite and with an open-circuit voltage a lithium cell can have.
    pub fn is_plausible(&self) -> bool {
        self.validate().is_ok() && (1.5..=5.0).contains(&self.v0) && self.r0 < 10.0 && self.r1 < 10.0
    }

    pub fn tau(&self) -> f64 {
        self.r1 * self.c1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.v0, self.r0, self.r1, self.c1]
    }

    /// Largest component-wise relative difference to `reference`.
    pub fn max_rel_diff(&self, reference: &EcmParams) -> f64 {
        self.to_array().iter().zip(reference.to_array()).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max)
    }

    fn to_log(self) -> [f64; 4] {
        self.to_array().map(f64::ln)
    }

    fn from_log(theta: &[f64; 4]) -> Self {
        Self { v0: theta[0].exp(), r0: theta[1].exp(), r1: theta[2].exp(), c1: theta[3].exp() }
    }
}

impl Default for EcmParams {
    fn default() -> Self {
        Self { v0: 3.3, r0: 0.02, r1: 0.02, c1: 1000.0 }
    }
}

/// Sampled current with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentProfile {
    timestamps: Vec<f64>,
    current: Vec<f64>,
}

impl CurrentProfile {
    pub fn new(timestamps: Vec<f64>, current: Vec<f64>) -> Result<Self> {
        if timestamps.len() != current.len() {
            return Err(Error::Input(format!("{} timestamps but {} current samples", timestamps.len(), current.len())));
        }
        if timestamps.is_empty() {
            return Err(Error::Input("empty current profile".into()));
        }
        if timestamps.iter().chain(&current).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in current profile".into()));
        }
        if let Some(k) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!("timestamps not strictly increasing at sample {}", k + 1)));
        }
        Ok(Self { timestamps, current })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Terminal voltage of the circuit driven by `profile`, with the RC branch
/// starting at `v1_initial`. Current is held constant between samples.
pub fn simulate_thevenin(params: &EcmParams, profile: &CurrentProfile, v1_initial: f64) -> Result<Vec<f64>> {
    params.validate()?;
    let mut out = vec![0.0; profile.len()];
    simulate_into(params, profile, v1_initial, &mut out);
    Ok(out)
}

fn simulate_into(p: &EcmParams, profile: &CurrentProfile, v1_initial: f64, out: &mut [f64]) {
    let (t, i) = (&profile.timestamps, &profile.current);
    let tau = p.tau();
    let mut v1 = v1_initial;
    for k in 0..t.len() {
        out[k] = p.v0 - i[k] * p.r0 - v1;
        if k + 1 < t.len() {
            let e = (-(t[k + 1] - t[k]) / tau).exp();
            v1 = v1 * e + i[k] * p.r1 * (1.0 - e);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Forward-difference step in log-parameter space.
    pub fd_step: f64,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    /// Relative decrease in squared residual below which the fit stops.
    pub tolerance: f64,
    pub v1_initial: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            fd_step: 1e-6,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            lambda_max: 1e12,
            tolerance: 1e-9,
            v1_initial: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcmFitResult {
    pub params: EcmParams,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared residuals after each accepted step, starting with the
    /// initial guess.
    pub cost_history: Vec<f64>,
}

/// Least-squares identification of `EcmParams` from a measured voltage trace.
///
/// Parameters are optimised as logarithms so they stay positive.
pub fn fit_ecm(
    measured: &[f64],
    profile: &CurrentProfile,
    init: &EcmParams,
    opts: &FitOptions,
) -> Result<EcmFitResult> {
    let n = measured.len();
    if n != profile.len() {
        return Err(Error::Input(format!("{n} voltage samples for a profile of {}", profile.len())));
    }
    if n < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData { needed: MIN_FIT_SAMPLES, got: n });
    }
    if measured.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite voltage sample".into()));
    }
    init.validate()?;

    let mut sim = vec![0.0; n];
    let mut residuals = |theta: &[f64; 4], r: &mut [f64]| -> f64 {
        simulate_into(&EcmParams::from_log(theta), profile, opts.v1_initial, &mut sim);
        let mut cost = 0.0;
        for k in 0..n {
            r[k] = sim[k] - measured[k];
            cost += r[k] * r[k];
        }
        if cost.is_finite() {
            cost
        } else {
            f64::INFINITY
        }
    };

    let mut theta = init.to_log();
    let mut r = vec![0.0; n];
    let mut cost = residuals(&theta, &mut r);
    if !cost.is_finite() {
        return Err(Error::Domain("initial guess produces a non-finite residual".into()));
    }
    // Residuals this small are rounding noise in the simulated voltage.
    let scale = measured.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = n as f64 * (4.0 * f64::EPSILON * scale).powi(2);
    let mut history = vec![cost];
    let mut lambda = opts.lambda_init;
    let mut iterations = 0;
    let mut converged = cost <= floor;

    let mut jac = vec![[0.0f64; 4]; n];
    let mut trial_r = vec![0.0; n];
    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        for j in 0..4 {
            let mut t = theta;
            t[j] += opts.fd_step;
            residuals(&t, &mut trial_r);
            for k in 0..n {
                jac[k][j] = (trial_r[k] - r[k]) / opts.fd_step;
            }
        }
        let mut a = [[0.0f64; 4]; 4];
        let mut g = [0.0f64; 4];
        for k in 0..n {
            for p in 0..4 {
                g[p] += jac[k][p] * r[k];
                for q in 0..4 {
                    a[p][q] += jac[k][p] * jac[k][q];
                }
            }
        }
        loop {
            let mut m = a;
            for (p, row) in m.iter_mut().enumerate() {
                row[p] += lambda * a[p][p];
            }
            let Some(delta) = cholesky_solve(&m, &g.map(|v| -v)) else {
                lambda *= opts.lambda_factor;
                if lambda > opts.lambda_max {
                    return Err(Error::DegenerateFit { last: EcmParams::from_log(&theta), iterations });
                }
                continue;
            };
            let trial: [f64; 4] = std::array::from_fn(|p| theta[p] + delta[p]);
            let trial_cost = residuals(&trial, &mut trial_r);
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost;
                theta = trial;
                std::mem::swap(&mut r, &mut trial_r);
                cost = trial_cost;
                history.push(cost);
                lambda = (lambda / opts.lambda_factor).max(f64::MIN_POSITIVE);
                converged = rel < opts.tolerance || cost <= floor;
                break;
            }
            lambda *= opts.lambda_factor;
            if lambda > opts.lambda_max {
                // No step in any damped direction lowers the cost: a minimum
                // to working precision.
                converged = true;
                break;
            }
        }
    }

    Ok(EcmFitResult {
        params: EcmParams::from_log(&theta),
        rmse: (cost / n as f64).sqrt(),
        iterations,
        converged,
        cost_history: history,
    })
}

/// Solves `m x = b` for symmetric positive definite `m`; `None` when a pivot
/// vanishes relative to its diagonal.
fn cholesky_solve(m: &[[f64; 4]; 4], b: &[f64; 4]) -> Option<[f64; 4]> {
    let mut l = [[0.0f64; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s.is_finite() && s > 0.0 && s > 1e-13 * m[i][i].abs()) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0f64; 4];
    for i in 0..4 {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = [0.0f64; 4];
    for i in (0..4).rev() {
        let s: f64 = (i + 1..4).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Which samples of a cycle are fitted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSegment {
    /// From the rest sample preceding the first discharge sample up to the
    /// first charging sample after it.
    #[default]
    Discharge,
    Full,
}

impl FitSegment {
    /// Sample range of `cycle` to fit, or `None` if it holds no discharge.
    pub fn range(self, cycle: &CycleRecord) -> Option<std::ops::Range<usize>> {
        match self {
            FitSegment::Full => Some(0..cycle.len()),
            FitSegment::Discharge => {
                let first = cycle.current.iter().position(|&i| i > CURRENT_THRESHOLD)?;
                let end = cycle.current[first..]
                    .iter()
                    .position(|&i| i < -CURRENT_THRESHOLD)
                    .map_or(cycle.len(), |k| first + k);
                Some(first.saturating_sub(1)..end)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractOptions {
    pub fit: FitOptions,
    /// Starting point for the first cycle; later cycles start from the
    /// previous accepted fit.
    pub init: EcmParams,
    pub segment: FitSegment,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), init: EcmParams::default(), segment: FitSegment::default() }
    }
}

/// Fitted parameters of one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleFit {
    pub cycle_index: u32,
    pub params: EcmParams,
    pub fit_rmse: f64,
    pub converged: bool,
    /// The fit failed and `params` were copied from the previous accepted row.
    pub carried_forward: bool,
}

/// Sequential per-cycle fitter: each fit starts from the last accepted
/// parameters, and a failed or implausible fit repeats them.
#[derive(Debug, Clone)]
pub struct CycleFitter {
    opts: ExtractOptions,
    last_accepted: Option<(EcmParams, f64)>,
}

impl CycleFitter {
    pub fn new(opts: ExtractOptions) -> Result<Self> {
        opts.init.validate()?;
        Ok(Self { opts, last_accepted: None })
    }

    pub fn fit_next(&mut self, cell_id: &str, cycle: &CycleRecord) -> Result<CycleFit> {
        cycle.validate()?;
        let start = self.last_accepted.map_or(self.opts.init, |(p, _)| p);
        match fit_cycle(cycle, &start, &self.opts) {
            Some(res) if res.params.is_plausible() && res.rmse.is_finite() => {
                self.last_accepted = Some((res.params, res.rmse));
                Ok(CycleFit {
                    cycle_index: cycle.cycle_index,
                    params: res.params,
                    fit_rmse: res.rmse,
                    converged: res.converged,
                    carried_forward: false,
                })
            }
            _ => {
                log::warn!(
                    "cell {cell_id} cycle {}: fit rejected, carrying previous parameters forward",
                    cycle.cycle_index
                );
                let (params, fit_rmse) = self.last_accepted.unwrap_or((self.opts.init, f64::NAN));
                Ok(CycleFit {
                    cycle_index: cycle.cycle_index,
                    params,
                    fit_rmse,
                    converged: false,
                    carried_forward: true,
                })
            }
        }
    }
}

/// Fits every cycle of `cell` in order with a [`CycleFitter`].
pub fn extract_cycle_features(cell: &Cell, opts: &ExtractOptions) -> Result<Vec<CycleFit>> {
    if cell.cycles.is_empty() {
        return Err(Error::Input(format!("cell {} has no cycles", cell.cell_id)));
    }
    let mut fitter = CycleFitter::new(*opts)?;
    cell.cycles.iter().map(|c| fitter.fit_next(&cell.cell_id, c)).collect()
}

fn fit_cycle(cycle: &CycleRecord, init: &EcmParams, opts: &ExtractOptions) -> Option<EcmFitResult> {
    let range = opts.segment.range(cycle)?;
    let profile =
        CurrentProfile::new(cycle.timestamps[range.clone()].to_vec(), cycle.current[range.clone()].to_vec()).ok()?;
    fit_ecm(&cycle.voltage[range], &profile, init, &opts.fit).ok()
}

/// Header of the per-cycle parameter table.
pub const FEATURE_TABLE_HEADER: &str = "cell_id,cycle_index,v0,r0,r1,c1,fit_rmse,converged";

/// Writes one row per cycle fit under [`FEATURE_TABLE_HEADER`], floats with
/// nine significant digits.
pub fn write_cycle_fits<W: Write>(mut w: W, cell_id: &str, fits: &[CycleFit], header: bool) -> std::io::Result<()> {
    use crate::fmt::f9;
    if header {
        writeln!(w, "{FEATURE_TABLE_HEADER}")?;
    }
    for f in fits {
        let p = f.params;
        writeln!(
            w,
            "{cell_id},{},{},{},{},{},{},{}",
            f.cycle_index,
            f9(p.v0),
            f9(p.r0),
            f9(p.r1),
            f9(p.c1),
            f9(f.fit_rmse),
            f.converged
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let m = [[4.0, 1.0, 0.0, 0.0], [1.0, 3.0, 0.5, 0.0], [0.0, 0.5, 2.0, 0.1], [0.0, 0.0, 0.1, 1.0]];
        let x_true = [1.0, -2.0, 0.5, 3.0];
        let b: [f64; 4] = std::array::from_fn(|i| (0..4).map(|j| m[i][j] * x_true[j]).sum());
        let x = cholesky_solve(&m, &b).unwrap();
        for i in 0..4 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
        let mut singular = m;
        singular[3] = [0.0; 4];
        assert!(cholesky_solve(&singular, &b).is_none());
    }

    #[test]
    fn discharge_segment_starts_one_sample_early_and_stops_at_charge() {
        let cycle = CycleRecord {
            cell_id: "c".into(),
            cycle_index: 0,
            timestamps: (0..8).map(f64::from).collect(),
            voltage: vec![3.0; 8],
            current: vec![0.0, 0.0, 1.0, 1.0, 0.0, -1.0, -1.0, 0.0],
            temperature: vec![25.0; 8],
            discharge_capacity: 1.0,
        };
        assert_eq!(FitSegment::Discharge.range(&cycle), Some(1..5));
        assert_eq!(FitSegment::Full.range(&cycle), Some(0..8));
        let mut rest = cycle.clone();
        rest.current = vec![0.0; 8];
        assert_eq!(FitSegment::Discharge.range(&rest), None);
    }
}
