//! Result files and the summary table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::runner::{RunMetrics, WALL_CLOCK_FIELDS};
use crate::error::Result;

pub fn result_path(dir: &Path, m: &RunMetrics) -> PathBuf {
    dir.join(format!("{}-{}.json", m.profile, m.workload))
}

pub fn to_json(m: &RunMetrics) -> Result<String> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    Ok(s)
}

/// Writes `<dir>/<profile>-<workload>.json`.
pub fn write_result(dir: &Path, m: &RunMetrics) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = result_path(dir, m);
    fs::write(&path, to_json(m)?)?;
    Ok(path)
}

/// Every `*.json` result in `dir`, ordered by profile, workload, size.
pub fn read_results(dir: &Path) -> Result<Vec<RunMetrics>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(serde_json::from_slice(&fs::read(&path)?)?);
        }
    }
    sort_runs(&mut out);
    Ok(out)
}

pub fn sort_runs(runs: &mut [RunMetrics]) {
    runs.sort_by(|a, b| {
        (&a.profile, &a.workload, a.n_records).cmp(&(&b.profile, &b.workload, b.n_records))
    });
}

/// The result as JSON with wall-clock fields removed.
pub fn deterministic_view(m: &RunMetrics) -> Result<Value> {
    let mut v = serde_json::to_value(m)?;
    if let Value::Object(map) = &mut v {
        for f in WALL_CLOCK_FIELDS {
            map.remove(f);
        }
    }
    Ok(v)
}

pub fn render_table(runs: &[RunMetrics]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<8} {:>8} {:>7} {:>10} {:>8} {:>7} {:>4} {:>4}",
        "profile", "workload", "records", "txns", "time_s", "space_x", "errors", "g6", "g17"
    );
    for m in runs {
        let _ = writeln!(
            s,
            "{:<10} {:<8} {:>8} {:>7} {:>10.4} {:>8.2} {:>7} {:>4} {:>4}",
            m.profile,
            m.workload,
            m.n_records,
            m.n_txns,
            m.completion_time_secs,
            m.space_factor,
            m.errors.values().sum::<u64>(),
            m.g6_violations,
            m.g17_violations,
        );
    }
    s
}
