//! Run artifacts as text: rank CSV and the multi-seed summary table.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsReport;
use crate::trainer::Mode;

/// One row per task, one column per layer: rank appended by that task.
/// Column sums are the final stored widths.
pub fn rank_csv(report: &MetricsReport) -> String {
    let layers = report.rank_allocation.len();
    let mut out = String::from("task");
    for l in 1..=layers {
        out.push_str(&format!(",layer_{l}"));
    }
    out.push('\n');
    let tasks = report.rank_allocation.first().map_or(0, Vec::len);
    for t in 0..tasks {
        out.push_str(&(t + 1).to_string());
        for row in &report.rank_allocation {
            out.push_str(&format!(",{}", row[t]));
        }
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub mode: Mode,
    pub runs: usize,
    pub acc_pct: (f64, f64),
    pub bwt_pct: (f64, f64),
    pub size_mb: (f64, f64),
}

/// Groups runs by mode, in mode order.
pub fn summarize(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<u8, (Mode, Vec<&MetricsReport>)> = BTreeMap::new();
    for r in reports {
        let key = match r.mode {
            Mode::BaselineUb => 0,
            Mode::St => 1,
            Mode::Fixed => 2,
            Mode::Full => 3,
        };
        groups.entry(key).or_insert((r.mode, Vec::new())).1.push(r);
    }
    groups
        .into_values()
        .map(|(mode, rs)| {
            let col = |f: &dyn Fn(&MetricsReport) -> f64| {
                mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                mode,
                runs: rs.len(),
                acc_pct: col(&|r| 100.0 * r.acc),
                bwt_pct: col(&|r| 100.0 * r.bwt),
                size_mb: col(&|r| r.size_mb),
            }
        })
        .collect()
}

pub fn render_table(rows: &[SummaryRow]) -> String {
    let cell = |(m, s): (f64, f64)| format!("{m:.2}({s:.2})");
    let mut lines = vec![format!(
        "{:<12} {:>5} {:>14} {:>14} {:>14}",
        "Method", "Runs", "ACC(%)", "BWT(%)", "Size(MB)"
    )];
    for r in rows {
        lines.push(format!(
            "{:<12} {:>5} {:>14} {:>14} {:>14}",
            r.mode.as_str(),
            r.runs,
            cell(r.acc_pct),
            cell(r.bwt_pct),
            cell(r.size_mb)
        ));
    }
    lines.join("\n") + "\n"
}

/// Reads `metrics.json` from `dir` itself and from each immediate
/// subdirectory, sorted by path.
pub fn load_reports(dir: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    let own = dir.join("metrics.json");
    if own.is_file() {
        paths.push(own);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let candidate = entry.path().join("metrics.json");
        if candidate.is_file() {
            paths.push(candidate);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no metrics.json under {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}
