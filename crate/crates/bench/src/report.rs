//! Result rows and their CSV and markdown renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::MethodId;
use crate::error::{BenchError, Result};

pub const CSV_HEADER: &str = "method,dataset,split,ratio,top1,top5,params,memory_mb,latency_ms,seed,wall_s";

/// Section order of the markdown report.
pub const SECTIONS: [&str; 7] = ["Baselines", "Scratch", "Pruning", "Quantization", "Offline", "Online", "Self"];

/// One measured model. `latency_ms` is 0 when latency was not measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub split: String,
    pub ratio: String,
    pub top1: f64,
    pub top5: f64,
    pub params: usize,
    pub memory_mb: f64,
    pub latency_ms: f64,
    pub seed: u64,
    pub wall_s: f64,
}

impl ReportRow {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.top1) || !(self.top1..=100.0).contains(&self.top5) {
            return Err(BenchError::Row(format!(
                "{}: need 0 <= top1 <= top5 <= 100, got top1 {} top5 {}",
                self.method, self.top1, self.top5
            )));
        }
        if self.params == 0 {
            return Err(BenchError::Row(format!("{}: params must be > 0", self.method)));
        }
        Ok(())
    }

    /// Report section, from the method column. Baseline rows carry the model
    /// kind as a suffix (`baseline.cnn2d`).
    pub fn section(&self) -> &'static str {
        let head = if self.method.starts_with("baseline") {
            "baseline"
        } else {
            &self.method
        };
        head.parse::<MethodId>().map_or("Other", |m| m.section())
    }

    /// The row with its timing columns cleared, for determinism checks.
    pub fn without_timing(&self) -> ReportRow {
        ReportRow {
            latency_ms: 0.0,
            wall_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl Format {
    pub fn from_path(p: &Path) -> Format {
        match p.extension().and_then(|e| e.to_str()) {
            Some("md") | Some("markdown") => Format::Markdown,
            _ => Format::Csv,
        }
    }
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Row(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(BenchError::Row(format!("unexpected header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?)
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(BenchError::io(path))?;
    from_csv(&text)
}

fn fmt_ms(v: f64) -> String {
    if v > 0.0 {
        format!("{v:.3}")
    } else {
        "-".into()
    }
}

/// Rows grouped by section, each section a table in row order.
pub fn to_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from("# Results\n");
    let mut sections: Vec<&str> = SECTIONS.to_vec();
    sections.push("Other");
    for sec in sections {
        let group: Vec<&ReportRow> = rows.iter().filter(|r| r.section() == sec).collect();
        if group.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\n## {sec}\n");
        out.push_str("| Method | Dataset | Split | Ratio | Top-1 | Top-5 | Params | Memory (MB) | Latency (ms/sample) | Seed |\n");
        out.push_str("|---|---|---|---|---:|---:|---:|---:|---:|---:|\n");
        for r in group {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.1} | {:.1} | {} | {:.2} | {} | {} |",
                r.method,
                r.dataset,
                r.split,
                r.ratio,
                r.top1,
                r.top5,
                r.params,
                r.memory_mb,
                fmt_ms(r.latency_ms),
                r.seed
            );
        }
    }
    out
}

/// Writes `rows` to `path` in `format`.
pub fn emit_report(rows: &[ReportRow], format: Format, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    for r in rows {
        r.check()?;
    }
    let text = match format {
        Format::Csv => to_csv(rows)?,
        Format::Markdown => to_markdown(rows),
    };
    std::fs::write(path, text).map_err(BenchError::io(path))
}
