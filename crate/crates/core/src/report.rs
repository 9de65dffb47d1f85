//! Run artifacts: CSVs, the accuracy heatmap, and summaries.
//!
//! All numeric output uses Rust's shortest round-trip float formatting, so
//! files are byte-stable across runs and parse back to the exact values.
//! The accuracy matrix CSV is `t,j,accuracy` triples; the heatmap SVG maps
//! accuracy `a` to the grayscale level `round(255 * (1 - a))` (0 is white,
//! 1 is black).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ItlError, Result};
use crate::metrics::{AccuracyMatrix, ParamCountReport};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| ItlError::io(path.display().to_string(), e))
}

pub fn render_accuracy_matrix_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::from("t,j,accuracy\n");
    for (ti, row) in m.rows().iter().enumerate() {
        for (ji, a) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", ti + 1, ji + 1, a);
        }
    }
    out
}

pub fn write_accuracy_matrix_csv(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    write_file(path, &render_accuracy_matrix_csv(m))
}

pub fn read_accuracy_matrix_csv(path: &Path) -> Result<AccuracyMatrix> {
    let text =
        std::fs::read_to_string(path).map_err(|e| ItlError::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "t,j,accuracy" {
                return Err(bad_csv(path, lineno, "expected header `t,j,accuracy`"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: usize = parse_field(&mut parts, path, lineno)?;
        let j: usize = parse_field(&mut parts, path, lineno)?;
        let a: f64 = parse_field(&mut parts, path, lineno)?;
        if t == rows.len() + 1 && j == 1 {
            rows.push(Vec::new());
        }
        if t != rows.len() || j != rows[t - 1].len() + 1 {
            return Err(bad_csv(path, lineno, "entries out of order"));
        }
        rows[t - 1].push(a);
    }
    AccuracyMatrix::from_rows(rows)
}

fn parse_field<'a, T: std::str::FromStr>(
    parts: &mut impl Iterator<Item = &'a str>,
    path: &Path,
    lineno: usize,
) -> Result<T> {
    parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad_csv(path, lineno, "malformed field"))
}

fn bad_csv(path: &Path, lineno: usize, detail: &str) -> ItlError {
    ItlError::DataFormat {
        path: path.display().to_string(),
        detail: format!("line {}: {detail}", lineno + 1),
    }
}

pub fn render_avg_accuracy_csv(m: &AccuracyMatrix) -> Result<String> {
    let mut out = String::from("t,avg_accuracy\n");
    for t in 1..=m.num_stages() {
        let _ = writeln!(out, "{},{}", t, m.avg_accuracy(t)?);
    }
    Ok(out)
}

pub fn write_avg_accuracy_csv(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    write_file(path, &render_avg_accuracy_csv(m)?)
}

pub fn render_forgetting_csv(m: &AccuracyMatrix) -> Result<String> {
    let mut out = String::from("t,forgetting\n");
    for t in 2..=m.num_stages() {
        let _ = writeln!(out, "{},{}", t, m.forgetting(t)?);
    }
    Ok(out)
}

pub fn write_forgetting_csv(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    write_file(path, &render_forgetting_csv(m)?)
}

pub fn render_param_count_csv(r: &ParamCountReport) -> String {
    let mut out = String::from("component,count\n");
    let _ = writeln!(out, "factors,{}", r.factor_entries);
    let _ = writeln!(out, "selectors,{}", r.selector_entries);
    let _ = writeln!(out, "hidden_biases,{}", r.hidden_bias_entries);
    let _ = writeln!(out, "heads,{}", r.head_entries);
    let _ = writeln!(out, "total,{}", r.total);
    out.push_str("task,cumulative_total\n");
    for (i, c) in r.cumulative_per_task.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, c);
    }
    out
}

pub fn write_param_count_csv(path: &Path, r: &ParamCountReport) -> Result<()> {
    write_file(path, &render_param_count_csv(r))
}

/// Task-wise accuracy heatmap. Cell `(t, j)` (row `t` top to bottom, column
/// `j` left to right) is drawn for `j <= t`; intensity encodes `a[t][j]`.
pub fn render_heatmap_svg(m: &AccuracyMatrix) -> String {
    const CELL: usize = 16;
    const MARGIN: usize = 24;
    let n = m.num_stages();
    let size = MARGIN + n * CELL + 4;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(
        out,
        r#"<!-- accuracy heatmap: gray = round(255*(1-a)), 0 -> white, 1 -> black -->"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>"#
    );
    for (ti, row) in m.rows().iter().enumerate() {
        for (ji, a) in row.iter().enumerate() {
            let level = (255.0 * (1.0 - a)).round() as u8;
            let x = MARGIN + ji * CELL;
            let y = MARGIN + ti * CELL;
            let _ = writeln!(
                out,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{level:02x}{level:02x}{level:02x}"><title>a[{t}][{j}] = {a}</title></rect>"##,
                t = ti + 1,
                j = ji + 1,
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="14" font-family="monospace" font-size="10">task j (after training task t, top to bottom)</text>"#
    );
    out.push_str("</svg>\n");
    out
}

pub fn write_heatmap_svg(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    write_file(path, &render_heatmap_svg(m))
}

/// Machine-readable run summary (`summary.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub tasks: usize,
    pub avg_accuracy: Vec<f64>,
    pub final_avg_accuracy: f64,
    pub final_forgetting: Option<f64>,
    pub params_after_task: Vec<u64>,
    pub total_params: u64,
    pub wall_secs: Vec<f64>,
    pub config: serde_json::Value,
}

pub fn render_summary_json(s: &RunSummary) -> Result<String> {
    let mut text = serde_json::to_string_pretty(s)?;
    text.push('\n');
    Ok(text)
}

pub fn write_summary_json(path: &Path, s: &RunSummary) -> Result<()> {
    write_file(path, &render_summary_json(s)?)
}

pub fn read_summary_json(path: &Path) -> Result<RunSummary> {
    let text =
        std::fs::read_to_string(path).map_err(|e| ItlError::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Human-readable digest for `report.txt` and stdout.
pub fn render_text_summary(m: &AccuracyMatrix, params: Option<&ParamCountReport>) -> Result<String> {
    let t = m.num_stages();
    let mut out = String::new();
    let _ = writeln!(out, "tasks trained: {t}");
    let _ = writeln!(out, "avg accuracy A_{t}: {:.4}", m.avg_accuracy(t)?);
    if t >= 2 {
        let _ = writeln!(out, "forgetting F_{t}: {:.6}", m.forgetting(t)?);
    }
    if let Some(p) = params {
        let _ = writeln!(
            out,
            "parameters: {} total ({}) = {} factors + {} selectors + {} hidden biases + {} heads",
            p.total,
            crate::metrics::format_mega(p.total),
            p.factor_entries,
            p.selector_entries,
            p.hidden_bias_entries,
            p.head_entries
        );
    }
    Ok(out)
}
