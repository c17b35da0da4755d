use serde::{Deserialize, Serialize};

use super::FeatureWindow;
use crate::error::{Error, Result};

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population statistics over every row of every window.
    pub fn fit(windows: &[FeatureWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Input("cannot fit normalization statistics on zero windows".into()))?;
        let width = first.width;
        let mut count = 0usize;
        let mut mean = vec![0.0; width];
        for w in windows {
            check_width(w, width)?;
            for t in 0..w.length {
                for (m, x) in mean.iter_mut().zip(w.row(t)) {
                    *m += x;
                }
            }
            count += w.length;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; width];
        for w in windows {
            for t in 0..w.length {
                for ((v, m), x) in var.iter_mut().zip(&mean).zip(w.row(t)) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        for (j, (s, m)) in std.iter().zip(&mean).enumerate() {
            if !(*s > 1e-12 * m.abs().max(1e-300)) {
                return Err(Error::Domain(format!("feature column {j} has zero variance")));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, w: &FeatureWindow) -> Result<FeatureWindow> {
        self.map(w, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, w: &FeatureWindow) -> Result<FeatureWindow> {
        self.map(w, |z, m, s| z * s + m)
    }

    /// Normalizes one feature row in place.
    pub fn apply_row(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    /// Restricts the statistics to the listed columns.
    pub fn select_columns(&self, columns: &[usize]) -> Normalizer {
        Normalizer {
            mean: columns.iter().map(|&c| self.mean[c]).collect(),
            std: columns.iter().map(|&c| self.std[c]).collect(),
        }
    }

    fn map(&self, w: &FeatureWindow, f: impl Fn(f64, f64, f64) -> f64) -> Result<FeatureWindow> {
        check_width(w, self.width())?;
        let features = w
            .features
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let j = k % w.width;
                f(x, self.mean[j], self.std[j])
            })
            .collect();
        Ok(FeatureWindow { features, ..w.clone() })
    }
}

fn check_width(w: &FeatureWindow, width: usize) -> Result<()> {
    if w.width != width || w.features.len() != w.length * w.width {
        return Err(Error::Input(format!(
            "window of cell {} at cycle {} has width {} (expected {width})",
            w.cell_id, w.anchor_cycle, w.width
        )));
    }
    Ok(())
}

/// Z-scores the feature columns of `windows`. Without a `normalizer` the
/// statistics are fitted on these windows, which must then be training data.
/// Targets are left untouched.
pub fn normalize(
    windows: Vec<FeatureWindow>,
    normalizer: Option<&Normalizer>,
) -> Result<(Vec<FeatureWindow>, Normalizer)> {
    let norm = match normalizer {
        Some(n) => n.clone(),
        None => Normalizer::fit(&windows)?,
    };
    let out = windows.iter().map(|w| norm.apply(w)).collect::<Result<Vec<_>>>()?;
    Ok((out, norm))
}
