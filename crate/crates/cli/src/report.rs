//! Per-target error tables.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context as _, Result};
use morphflow_core::fitting::ErrorSummary;

pub const SUMMARY_LABEL: &str = "all";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub target: String,
    pub vertices: usize,
    pub summary: ErrorSummary,
}

/// One row per target, then one row over every vertex of every target.
pub fn summarize(targets: &[(String, Vec<f64>)]) -> Result<Vec<SummaryRow>> {
    if targets.is_empty() {
        bail!("no fit results to report");
    }
    let mut rows = Vec::with_capacity(targets.len() + 1);
    let mut pooled = Vec::new();
    for (name, errors) in targets {
        let summary = ErrorSummary::of(errors).with_context(|| format!("target {name}"))?;
        rows.push(SummaryRow {
            target: name.clone(),
            vertices: errors.len(),
            summary,
        });
        pooled.extend_from_slice(errors);
    }
    rows.push(SummaryRow {
        target: SUMMARY_LABEL.into(),
        vertices: pooled.len(),
        summary: ErrorSummary::of(&pooled)?,
    });
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("target,vertices,mean,std,max,rms\n");
    for r in rows {
        let e = &r.summary;
        writeln!(s, "{},{},{},{},{},{}", r.target, r.vertices, e.mean, e.std, e.max, e.rms).unwrap();
    }
    s
}

/// One error per line; `#` lines are comments.
pub fn format_errors(errors: &[f64]) -> String {
    let mut s = String::from("# per-vertex euclidean error\n");
    for e in errors {
        writeln!(s, "{e:?}").unwrap();
    }
    s
}

pub fn parse_errors(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(k, l)| l.parse::<f64>().with_context(|| format!("bad error value '{l}' (entry {})", k + 1)))
        .collect()
}

pub fn read_errors(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_errors(&text).with_context(|| format!("in {}", path.display()))
}
