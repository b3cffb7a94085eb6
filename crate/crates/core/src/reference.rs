//! Published result tables, as tab-separated text.
//!
//! Header: `method`, then the five report columns by their CSV names. Lines
//! starting with `#` are comments.

use crate::metrics::{self, MetricError};
use crate::pipeline::{Column, COLUMNS};

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    /// In [`COLUMNS`] order.
    pub values: [f64; 5],
}

impl TableRow {
    pub fn value(&self, c: Column) -> f64 {
        self.values[COLUMNS.iter().position(|&x| x == c).expect("known column")]
    }
}

pub fn parse_table(text: &str) -> Result<Vec<TableRow>, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or("empty table")?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let expected: Vec<&str> = std::iter::once("method").chain(COLUMNS.iter().map(|c| c.key())).collect();
    if cols != expected {
        return Err(format!("header {cols:?}, expected {expected:?}"));
    }
    lines
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').map(str::trim).collect();
            if f.len() != 6 {
                return Err(format!("line {}: {} fields", n + 1, f.len()));
            }
            let mut values = [0.0; 5];
            for (v, s) in values.iter_mut().zip(&f[1..]) {
                *v = s.parse().map_err(|e| format!("line {}: {s:?}: {e}", n + 1))?;
            }
            Ok(TableRow {
                method: f[0].to_string(),
                values,
            })
        })
        .collect()
}

/// Spearman's rho of `metric` against human agreement over `rows`.
pub fn correlation(rows: &[TableRow], metric: Column) -> Result<f64, MetricError> {
    let x: Vec<f64> = rows.iter().map(|r| r.value(Column::HumanAgreement)).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.value(metric)).collect();
    metrics::spearman(&x, &y)
}
