//! Report tables from finished runs.
//!
//! Floats are written in shortest round-trip form so that derived columns
//! can be recomputed exactly from the stored ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{write_metrics_csv, Importance, RunReport, Variant};

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn shared_horizons(reports: &[RunReport]) -> Result<Vec<usize>> {
    let first = reports.first().ok_or_else(|| Error::Input("no run reports to write".into()))?;
    let horizons: Vec<usize> = first.summary.iter().map(|s| s.horizon).collect();
    for r in reports {
        if r.summary.iter().map(|s| s.horizon).ne(horizons.iter().copied()) {
            return Err(Error::Input(format!(
                "report {} covers different horizons than report {}",
                r.variant, first.variant
            )));
        }
    }
    Ok(horizons)
}

/// One row per report: size, cost, and seed-mean RMSE, MAE and efficiency
/// at each horizon.
pub fn comparison_table(reports: &[RunReport]) -> Result<String> {
    let horizons = shared_horizons(reports)?;
    let mut s = String::from("variant,params_k,flops_m");
    for h in &horizons {
        write!(s, ",rmse_h{h},mae_h{h},eta_h{h}").expect("string write");
    }
    s.push_str(",mean_eta\n");
    for r in reports {
        write!(s, "{},{},{}", r.variant, r.params_k, r.macs as f64 / 1e6).expect("string write");
        for m in &r.summary {
            write!(s, ",{},{},{}", m.rmse_mean, m.mae_mean, opt(m.eta)).expect("string write");
        }
        writeln!(s, ",{}", opt(r.mean_eta)).expect("string write");
    }
    Ok(s)
}

/// Reports against the base run (or the first report when there is none),
/// with the RMSE change at each horizon.
pub fn ablation_table(reports: &[RunReport]) -> Result<String> {
    let horizons = shared_horizons(reports)?;
    let reference = reports.iter().find(|r| r.variant == Variant::Base).unwrap_or(&reports[0]);
    let mut s = String::from("variant,params_k,flops_m,attention_score_entries");
    for h in &horizons {
        write!(s, ",rmse_h{h}").expect("string write");
    }
    for h in &horizons {
        write!(s, ",delta_rmse_h{h}").expect("string write");
    }
    s.push('\n');
    for r in reports {
        write!(s, "{},{},{},{}", r.variant, r.params_k, r.macs as f64 / 1e6, r.attention_score_entries)
            .expect("string write");
        for m in &r.summary {
            write!(s, ",{}", m.rmse_mean).expect("string write");
        }
        for (m, b) in r.summary.iter().zip(&reference.summary) {
            write!(s, ",{}", m.rmse_mean - b.rmse_mean).expect("string write");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn importance_table(imp: &Importance) -> String {
    let mut s = String::from("feature,raw,percent\n");
    for ((f, r), p) in imp.features.iter().zip(&imp.raw).zip(&imp.percent) {
        writeln!(s, "{f},{r},{p}").expect("string write");
    }
    s
}

/// Plain-text overview naming the variant with the highest mean efficiency.
pub fn summary_text(reports: &[RunReport], importance: Option<&Importance>) -> Result<String> {
    let horizons = shared_horizons(reports)?;
    let mut s = String::new();
    for r in reports {
        writeln!(
            s,
            "{}: {} parameters, {} multiply-adds, {} seeds, mean efficiency {}",
            r.variant,
            r.param_count,
            r.macs,
            r.runs.len(),
            r.mean_eta.map_or("undefined".into(), |e| format!("{e:.1}"))
        )
        .expect("string write");
        for m in &r.summary {
            writeln!(s, "  h={:<3} rmse {:.4} ± {:.4}  mae {:.4}", m.horizon, m.rmse_mean, m.rmse_std, m.mae_mean)
                .expect("string write");
        }
    }
    let best =
        reports.iter().filter_map(|r| r.mean_eta.map(|e| (r, e))).fold(None::<(&RunReport, f64)>, |acc, (r, e)| {
            match acc {
                Some((_, be)) if be >= e => acc,
                _ => Some((r, e)),
            }
        });
    match best {
        Some((r, e)) => writeln!(s, "best efficiency: {} (mean eta {e:.1} over horizons {horizons:?})", r.variant),
        None => writeln!(s, "best efficiency: undefined"),
    }
    .expect("string write");
    if let Some(imp) = importance {
        writeln!(s, "permutation importance:").expect("string write");
        for (f, p) in imp.features.iter().zip(&imp.percent) {
            writeln!(s, "  {f:<16} {p:6.2}%").expect("string write");
        }
    }
    Ok(s)
}

/// Writes every table into `out_dir` (created if missing) and returns the
/// paths written. The ablation table needs at least two reports.
pub fn write_report(reports: &[RunReport], importance: Option<&Importance>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![(COMPARISON_FILE, comparison_table(reports)?)];
    if reports.len() > 1 {
        files.push((ABLATION_FILE, ablation_table(reports)?));
    }
    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, reports).map_err(Error::io(out_dir))?;
    files.push((METRICS_FILE, String::from_utf8(metrics).expect("ascii table")));
    if let Some(imp) = importance {
        files.push((IMPORTANCE_FILE, importance_table(imp)));
    }
    files.push((SUMMARY_FILE, summary_text(reports, importance)?));
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    files
        .into_iter()
        .map(|(name, body)| {
            let path = out_dir.join(name);
            std::fs::write(&path, body).map_err(Error::io(&path))?;
            Ok(path)
        })
        .collect()
}
