//! Report types and their renderings.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendInfo;
use crate::domain::{Aggregation, SoftCounterfactualSet, Substitution};
use crate::metrics::{self, NoiseConfig};

use super::{PipelineError, RunOutput};

/// Values are compared, flagged and printed at this many decimals.
pub const DECIMALS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub used: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub aggregation: Aggregation,
    /// Human agreement (mean average precision against rationales).
    pub map: Option<f64>,
    pub infidelity: Option<f64>,
    pub validity_soft: Option<f64>,
    pub c_soft: Option<f64>,
    pub average_time_seconds: Option<f64>,
    /// Instances with an attribution record for this method.
    pub instances: usize,
    pub map_usage: Usage,
    pub infidelity_usage: Usage,
    pub validity_usage: Usage,
    pub c_soft_usage: Usage,
}

impl ReportRow {
    pub fn value(&self, c: Column) -> Option<f64> {
        match c {
            Column::HumanAgreement => self.map,
            Column::Infidelity => self.infidelity,
            Column::ValiditySoft => self.validity_soft,
            Column::CSoft => self.c_soft,
            Column::AverageTime => self.average_time_seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    HumanAgreement,
    Infidelity,
    ValiditySoft,
    CSoft,
    AverageTime,
}

pub const COLUMNS: [Column; 5] = [
    Column::HumanAgreement,
    Column::Infidelity,
    Column::ValiditySoft,
    Column::CSoft,
    Column::AverageTime,
];

impl Column {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Column::HumanAgreement | Column::ValiditySoft | Column::CSoft)
    }

    /// CSV header name.
    pub fn key(self) -> &'static str {
        match self {
            Column::HumanAgreement => "human_agreement",
            Column::Infidelity => "infidelity",
            Column::ValiditySoft => "validity_soft",
            Column::CSoft => "c_soft",
            Column::AverageTime => "average_time_seconds",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Column::HumanAgreement => "Human Agreement",
            Column::Infidelity => "Infidelity",
            Column::ValiditySoft => "Validity_soft",
            Column::CSoft => "C_soft",
            Column::AverageTime => "Average Time",
        }
    }

    fn from_key(s: &str) -> Option<Column> {
        COLUMNS.into_iter().find(|c| c.key() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric: Column,
    /// Absent when fewer than two rows carry both values or a column is constant.
    pub spearman_rho: Option<f64>,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnosticKind {
    /// The instance was dropped from a metric because something went wrong.
    Failure,
    /// The instance was legitimately left out of a metric.
    Skipped,
    /// Informational; nothing was excluded.
    Note,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub method: String,
    /// Absent for per-method stages (infidelity).
    pub aggregation: Option<Aggregation>,
    /// Empty for row-level summaries.
    pub instance_id: String,
    pub kind: DiagnosticKind,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub v: usize,
    pub k: usize,
    pub candidate_pool: usize,
    pub dedup_retries: usize,
    pub rank_by_abs: bool,
    pub seed: u64,
    /// Absent when infidelity is disabled.
    pub noise: Option<NoiseConfig>,
    pub infidelity_on_logit: bool,
    pub backend: BackendInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub correlations: Vec<Correlation>,
    pub run_config: RunEcho,
    pub diagnostics: Vec<Diagnostic>,
}

impl EvaluationReport {
    pub fn has_failures(&self) -> bool {
        self.diagnostics.iter().any(|d| d.kind == DiagnosticKind::Failure)
    }

    pub fn best_flags(&self) -> Vec<[bool; 5]> {
        best_flags(&self.rows)
    }
}

fn rounded(x: f64) -> f64 {
    format!("{x:.DECIMALS$}").parse().expect("formatted float parses")
}

/// Per row, whether each column holds the best value. Values are compared
/// after rounding to the printed precision, so printed ties are all flagged.
pub fn best_flags(rows: &[ReportRow]) -> Vec<[bool; 5]> {
    let mut flags = vec![[false; 5]; rows.len()];
    for (ci, &c) in COLUMNS.iter().enumerate() {
        let vals: Vec<Option<f64>> = rows.iter().map(|r| r.value(c).map(rounded)).collect();
        let best = vals.iter().flatten().copied().fold(None, |acc: Option<f64>, v| {
            Some(match acc {
                None => v,
                Some(a) if c.higher_is_better() => a.max(v),
                Some(a) => a.min(v),
            })
        });
        if let Some(b) = best {
            for (ri, v) in vals.iter().enumerate() {
                flags[ri][ci] = *v == Some(b);
            }
        }
    }
    flags
}

/// Spearman's rho of each metric column against human agreement, over the
/// rows where both are present.
pub fn correlations(rows: &[ReportRow]) -> Vec<Correlation> {
    [Column::ValiditySoft, Column::CSoft, Column::Infidelity]
        .into_iter()
        .map(|c| {
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter_map(|r| Some((r.map?, r.value(c)?)))
                .unzip();
            let (spearman_rho, note) = match metrics::spearman(&x, &y) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Correlation {
                metric: c,
                spearman_rho,
                rows: x.len(),
                note,
            }
        })
        .collect()
}

fn cell(v: Option<f64>, best: bool) -> String {
    match v {
        Some(x) => format!("{x:.DECIMALS$}{}", if best { "*" } else { "" }),
        None => "-".to_string(),
    }
}

pub fn render_table(report: &EvaluationReport) -> String {
    let flags = report.best_flags();
    let mut header = vec!["Method".to_string(), "Aggregation".to_string()];
    header.extend(COLUMNS.iter().map(|c| {
        format!("{} {}", c.label(), if c.higher_is_better() { "↑" } else { "↓" })
    }));
    let mut lines = vec![header];
    for (row, f) in report.rows.iter().zip(&flags) {
        let mut l = vec![row.method.clone(), row.aggregation.to_string()];
        l.extend(COLUMNS.iter().zip(f).map(|(&c, &b)| cell(row.value(c), b)));
        lines.push(l);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, &w))| {
                let pad = w - s.chars().count();
                if i < 2 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    out.push_str("* best in column\n\nSpearman's correlation with Human Agreement\n");
    for c in &report.correlations {
        let rho = c
            .spearman_rho
            .map(|r| format!("{r:.DECIMALS$}"))
            .unwrap_or_else(|| "-".into());
        write!(out, "{:<14}{rho:>10}  rows={}", c.metric.label(), c.rows).unwrap();
        if let Some(n) = &c.note {
            write!(out, "  ({n})").unwrap();
        }
        out.push('\n');
    }
    let failures = report
        .diagnostics
        .iter()
        .filter(|d| d.kind == DiagnosticKind::Failure)
        .count();
    if !report.diagnostics.is_empty() {
        writeln!(
            out,
            "\n{} diagnostics ({failures} failures)",
            report.diagnostics.len()
        )
        .unwrap();
    }
    out
}

pub const CSV_HEADER: &str =
    "method,aggregation,human_agreement,infidelity,validity_soft,c_soft,average_time_seconds,best";
pub const CSV_CORRELATION_HEADER: &str = "metric,spearman_rho,rows";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.DECIMALS$}")).unwrap_or_default()
}

/// Rows, a blank line, then the correlation block. `best` lists the flagged
/// columns separated by `;`.
pub fn render_csv(report: &EvaluationReport) -> String {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for (row, f) in report.rows.iter().zip(report.best_flags()) {
        let best: Vec<&str> = COLUMNS
            .iter()
            .zip(f)
            .filter(|(_, b)| *b)
            .map(|(c, _)| c.key())
            .collect();
        let mut cells = vec![csv_field(&row.method), row.aggregation.to_string()];
        cells.extend(COLUMNS.iter().map(|&c| num(row.value(c))));
        cells.push(best.join(";"));
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    writeln!(out, "\n{CSV_CORRELATION_HEADER}").unwrap();
    for c in &report.correlations {
        writeln!(out, "{},{},{}", c.metric.key(), num(c.spearman_rho), c.rows).unwrap();
    }
    out
}

pub fn render_json(report: &EvaluationReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// One data row read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub method: String,
    pub aggregation: Aggregation,
    pub values: [Option<f64>; 5],
    pub best: Vec<Column>,
}

/// Splits one CSV line, honouring double-quoted fields.
fn split_csv(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    out.push(cur);
    out
}

fn parse_num(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
    }
}

/// Parses [`render_csv`] output back into rows and correlations.
#[allow(clippy::type_complexity)]
pub fn parse_report_csv(text: &str) -> Result<(Vec<CsvRow>, Vec<(Column, Option<f64>, usize)>), String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing report header".into());
    }
    let mut rows = Vec::new();
    for line in lines.by_ref() {
        if line.is_empty() {
            break;
        }
        let f = split_csv(line);
        if f.len() != 8 {
            return Err(format!("expected 8 fields, got {}: {line}", f.len()));
        }
        let mut values = [None; 5];
        for (i, v) in values.iter_mut().enumerate() {
            *v = parse_num(&f[2 + i])?;
        }
        let best = f[7]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| Column::from_key(s).ok_or_else(|| format!("unknown column {s:?}")))
            .collect::<Result<_, _>>()?;
        rows.push(CsvRow {
            method: f[0].clone(),
            aggregation: f[1].parse()?,
            values,
            best,
        });
    }
    if lines.next() != Some(CSV_CORRELATION_HEADER) {
        return Err("missing correlation header".into());
    }
    let mut corr = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f = split_csv(line);
        if f.len() != 3 {
            return Err(format!("expected 3 fields, got {}: {line}", f.len()));
        }
        let metric = Column::from_key(&f[0]).ok_or_else(|| format!("unknown metric {:?}", f[0]))?;
        let rows_n = f[2].parse().map_err(|e| format!("{:?}: {e}", f[2]))?;
        corr.push((metric, parse_num(&f[1])?, rows_n));
    }
    Ok((rows, corr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn render(self, report: &EvaluationReport) -> String {
        match self {
            ReportFormat::TableText => render_table(report),
            ReportFormat::Csv => render_csv(report),
            ReportFormat::Json => render_json(report),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::TableText => "report.txt",
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
        }
    }
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    instance_id: &'a str,
    method: &'a str,
    aggregation: Aggregation,
    seed: u64,
    index: usize,
    text: &'a str,
    substitutions: &'a [Substitution],
    fallback: bool,
    duplicate: bool,
}

/// One JSON line per counterfactual.
pub fn write_counterfactuals<W: Write>(mut w: W, sets: &[SoftCounterfactualSet]) -> io::Result<()> {
    for set in sets {
        for (index, cf) in set.counterfactuals.iter().enumerate() {
            let rec = ExportRecord {
                instance_id: &set.instance_id,
                method: &set.method,
                aggregation: set.aggregation,
                seed: set.seed,
                index,
                text: &cf.text,
                substitutions: &cf.substitutions,
                fallback: cf.fallback,
                duplicate: cf.duplicate,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()
}

pub const COUNTERFACTUALS_FILE: &str = "counterfactuals.jsonl";

/// Writes every report format plus the counterfactual export into `dir`.
pub fn write_run_dir(dir: &Path, out: &RunOutput) -> Result<(), PipelineError> {
    let wrap = |p: &Path| {
        let path = p.display().to_string();
        move |source| PipelineError::Output { path, source }
    };
    fs::create_dir_all(dir).map_err(wrap(dir))?;
    for f in [ReportFormat::Json, ReportFormat::TableText, ReportFormat::Csv] {
        let p = dir.join(f.file_name());
        fs::write(&p, f.render(&out.report)).map_err(wrap(&p))?;
    }
    let p = dir.join(COUNTERFACTUALS_FILE);
    let file = fs::File::create(&p).map_err(wrap(&p))?;
    write_counterfactuals(io::BufWriter::new(file), &out.counterfactuals).map_err(wrap(&p))
}

/// Reads `report.json` from a run directory.
pub fn read_run_dir(dir: &Path) -> Result<EvaluationReport, PipelineError> {
    let p = dir.join(ReportFormat::Json.file_name());
    let text = fs::read_to_string(&p).map_err(|source| PipelineError::Output {
        path: p.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
}
