//! CSV and aligned-text rendering of metric reports.
//!
//! Undefined metric values render as an em dash in text tables and as
//! `null` in CSV, never as 0 or NaN.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Fraction -> percent with two decimals, em dash when undefined.
pub fn format_percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", x * 100.0),
        None => "\u{2014}".to_string(),
    }
}

/// Machine-readable field: full-precision float or `null`.
pub fn format_csv_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "null".to_string(),
    }
}

/// One table row: label followed by percent columns, two-space separated.
pub fn render_row(label: &str, values: &[Option<f64>]) -> String {
    let mut out = label.to_string();
    for v in values {
        out.push_str("  ");
        out.push_str(&format_percent(*v));
    }
    out
}

/// Aligned-column text table. The first column is left-aligned, the rest
/// right-aligned, columns separated by two spaces.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let emit = |cells: Vec<String>, out: &mut String| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let pad = widths[i].saturating_sub(cell.chars().count());
            if i == 0 {
                out.push_str(cell);
                if i + 1 < cols {
                    out.push_str(&" ".repeat(pad));
                }
            } else {
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(headers.iter().map(|h| h.to_string()).collect(), &mut out);
    for row in rows {
        emit(row.clone(), &mut out);
    }
    out
}

/// Write rows as CSV with LF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// CSV row for one evaluation, mirroring the machine-readable report
/// contract: split, flags, metrics, sample count, threshold.
pub fn eval_csv_row(
    split: &str,
    flags: [bool; 4],
    report: &MetricReport,
    n: usize,
) -> Vec<String> {
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    vec![
        split.to_string(),
        flag(flags[0]),
        flag(flags[1]),
        flag(flags[2]),
        flag(flags[3]),
        format_csv_value(report.acc),
        format_csv_value(report.auc),
        format_csv_value(report.sen),
        format_csv_value(report.spe),
        format_csv_value(report.f),
        n.to_string(),
        format!("{}", report.threshold),
    ]
}

/// Header matching [`eval_csv_row`].
pub const EVAL_CSV_HEADER: [&str; 12] = [
    "split",
    "rcc",
    "rds",
    "ff",
    "attention",
    "acc",
    "auc",
    "sen",
    "spe",
    "f",
    "n",
    "threshold",
];
