//! Speed report output: per-sample CSV, JSON summary, text histogram.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::speed::{Direction, SpeedReport, Summary};

pub const CSV_NAME: &str = "samples.csv";
pub const JSON_NAME: &str = "summary.json";
pub const HISTOGRAM_NAME: &str = "histogram.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub histogram: Option<PathBuf>,
}

#[derive(Serialize)]
struct JsonSummary<'a> {
    sample_count: usize,
    failures: usize,
    summaries: &'a [Summary],
    overhead_ratio: &'a BTreeMap<Direction, f64>,
}

pub fn render_csv(report: &SpeedReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "direction", "bytes", "elapsed", "mbps"])?;
    for s in &report.samples {
        w.write_record([
            s.mode.to_string(),
            s.direction.to_string(),
            s.bytes.to_string(),
            format!("{:.6}", s.elapsed),
            format!("{:.6}", s.mbps),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_json(report: &SpeedReport) -> String {
    serde_json::to_string_pretty(&JsonSummary {
        sample_count: report.samples.len(),
        failures: report.failures,
        summaries: &report.summaries,
        overhead_ratio: &report.overhead_ratio,
    })
    .expect("summary serializes")
}

pub fn render_histogram(report: &SpeedReport) -> String {
    let mut out = String::new();
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "{} {} (n={}, mean {:.2} Mb/s, min {:.2}, max {:.2})",
            s.mode, s.direction, s.count, s.mean, s.min, s.max
        );
        let widest = s.histogram.iter().map(|b| b.count).max().unwrap_or(0).max(1);
        for b in &s.histogram {
            let bar = "#".repeat((b.count * 40).div_ceil(widest));
            let _ = writeln!(out, "  {:>7.1}-{:<7.1} Mb/s | {bar} {}", b.lower, b.upper, b.count);
        }
        out.push('\n');
    }
    out
}

/// Write the report into `dir` (created if missing).
pub fn emit_report(report: &SpeedReport, dir: &Path, histogram: bool) -> std::io::Result<ReportFiles> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(CSV_NAME);
    let csv = render_csv(report).map_err(std::io::Error::other)?;
    std::fs::write(&csv_path, csv)?;
    let json_path = dir.join(JSON_NAME);
    std::fs::write(&json_path, render_json(report))?;
    let hist_path = if histogram {
        let p = dir.join(HISTOGRAM_NAME);
        std::fs::write(&p, render_histogram(report))?;
        Some(p)
    } else {
        None
    };
    Ok(ReportFiles {
        csv: csv_path,
        json: json_path,
        histogram: hist_path,
    })
}
