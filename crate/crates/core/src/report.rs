//! Tables in the `R & CI` layout, the cross-scenario energy summary, and the
//! analysis CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::AnalysisRow;
use crate::config::{ReportConfig, SummarySelection};
use crate::model::{Metric, ParamValue};
use crate::ratiostats::{Classification, RatioSummary};

pub const CSV_HEADER: [&str; 8] = [
    "scenario",
    "param",
    "metric",
    "n",
    "r_geo",
    "ci_low",
    "ci_high",
    "classification",
];

/// Classification column value for cells with fewer than two pairs.
pub const INSUFFICIENT: &str = "INSUFFICIENT_DATA";

/// Table column order and headings; RAM is the rss metric.
pub const TABLE_COLUMNS: [(Metric, &str); 5] = [
    (Metric::Time, "Time"),
    (Metric::Cpu, "CPU"),
    (Metric::Energy, "Energy"),
    (Metric::Vms, "VMS"),
    (Metric::Rss, "RAM"),
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("scenario {0:?} has no summary category")]
    UnmappedScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub r_geo: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl From<&RatioSummary> for Cell {
    fn from(s: &RatioSummary) -> Self {
        Cell {
            r_geo: s.r_geo,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub param: ParamValue,
    /// In [`TABLE_COLUMNS`] order.
    pub cells: [Option<Cell>; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTable {
    pub scenario: String,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub category: String,
    pub energy_ratio_range: Option<(f64, f64)>,
    pub interpretation: String,
}

/// Rounds half to even at three decimals. Rust's fixed-precision formatting
/// works on the exact binary value and breaks exact ties to even.
pub fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

pub fn render_cell(cell: Option<&Cell>) -> String {
    match cell {
        Some(c) => format!(
            "{} & {}--{}",
            fmt3(c.r_geo),
            fmt3(c.ci_low),
            fmt3(c.ci_high)
        ),
        None => "n/a".to_string(),
    }
}

/// `numpy_vectorized` -> `Numpy Vectorized.`
pub fn caption(scenario: &str) -> String {
    let words: Vec<String> = scenario
        .split(['_', '-'])
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect();
    format!("{}.", words.join(" "))
}

/// Groups analysis rows into one table per scenario (first-appearance order),
/// rows ascending by parameter.
pub fn build_tables(rows: &[AnalysisRow]) -> Vec<ScenarioTable> {
    let mut tables: Vec<ScenarioTable> = Vec::new();
    for row in rows {
        let Some(col) = TABLE_COLUMNS.iter().position(|(m, _)| *m == row.metric) else {
            continue;
        };
        let table = match tables.iter_mut().position(|t| t.scenario == row.scenario) {
            Some(i) => &mut tables[i],
            None => {
                tables.push(ScenarioTable {
                    scenario: row.scenario.clone(),
                    rows: Vec::new(),
                });
                tables.last_mut().unwrap()
            }
        };
        let trow = match table.rows.iter_mut().position(|r| r.param == row.param) {
            Some(i) => &mut table.rows[i],
            None => {
                table.rows.push(TableRow {
                    param: row.param.clone(),
                    cells: [None; 5],
                });
                table.rows.last_mut().unwrap()
            }
        };
        trow.cells[col] = row.summary.as_ref().map(Cell::from);
    }
    for t in &mut tables {
        t.rows.sort_by(|a, b| a.param.sort_cmp(&b.param));
    }
    tables
}

fn row_fields(row: &TableRow) -> Vec<String> {
    let mut fields = vec![row.param.to_string()];
    for cell in &row.cells {
        match cell {
            Some(c) => {
                fields.push(fmt3(c.r_geo));
                fields.push(format!("{}--{}", fmt3(c.ci_low), fmt3(c.ci_high)));
            }
            None => {
                fields.push("n/a".into());
                fields.push("n/a".into());
            }
        }
    }
    fields
}

fn header_fields(param_name: &str) -> Vec<String> {
    let mut h = vec![param_name.to_string()];
    for (_, label) in TABLE_COLUMNS {
        h.push(format!("{label} R"));
        h.push(format!("{label} CI"));
    }
    h
}

/// Ampersand-separated layout, one line per parameter point.
pub fn render_scenario_table(table: &ScenarioTable, param_name: &str) -> String {
    let mut s = String::new();
    writeln!(s, "{}", caption(&table.scenario)).unwrap();
    writeln!(s, "{}", header_fields(param_name).join(" & ")).unwrap();
    for row in &table.rows {
        writeln!(s, "{}", row_fields(row).join(" & ")).unwrap();
    }
    s
}

/// Markdown pipe table.
pub fn render_scenario_pipe(table: &ScenarioTable, param_name: &str) -> String {
    let header = header_fields(param_name);
    let mut s = String::new();
    writeln!(s, "**{}**\n", caption(&table.scenario)).unwrap();
    writeln!(s, "| {} |", header.join(" | ")).unwrap();
    writeln!(s, "|{}", "---|".repeat(header.len())).unwrap();
    for row in &table.rows {
        writeln!(s, "| {} |", row_fields(row).join(" | ")).unwrap();
    }
    s
}

fn interpretation(lo: f64, hi: f64) -> String {
    let pct = |v: f64| format!("{:.0}", v * 100.0);
    let span = |a: f64, b: f64| {
        let (a, b) = (pct(a), pct(b));
        if a == b {
            format!("{a}%")
        } else {
            format!("{a}--{b}%")
        }
    };
    if hi < 1.0 {
        format!("{} less", span(1.0 - hi, 1.0 - lo))
    } else if lo > 1.0 {
        format!("{} more", span(lo - 1.0, hi - 1.0))
    } else {
        "no clear difference".to_string()
    }
}

/// Per category, the range of energy ratios over the selected parameter
/// points of its scenarios.
pub fn render_summary(
    tables: &[ScenarioTable],
    categories: &BTreeMap<String, String>,
    selection: &SummarySelection,
) -> Result<Vec<SummaryRow>, ReportError> {
    let energy_col = TABLE_COLUMNS
        .iter()
        .position(|(m, _)| *m == Metric::Energy)
        .expect("energy column");
    let mut ranges: BTreeMap<&str, Option<(f64, f64)>> = BTreeMap::new();
    for table in tables {
        let category = categories
            .get(&table.scenario)
            .ok_or_else(|| ReportError::UnmappedScenario(table.scenario.clone()))?;
        let range = ranges.entry(category.as_str()).or_insert(None);

        let chosen: Vec<&TableRow> = match selection {
            // rows are already ascending
            SummarySelection::Top(n) => table.rows.iter().rev().take(*n).collect(),
            SummarySelection::Values(values) => table
                .rows
                .iter()
                .filter(|r| values.iter().any(|v| v.sort_cmp(&r.param).is_eq()))
                .collect(),
        };
        for row in chosen {
            if let Some(c) = row.cells[energy_col] {
                *range = Some(match *range {
                    None => (c.r_geo, c.r_geo),
                    Some((lo, hi)) => (lo.min(c.r_geo), hi.max(c.r_geo)),
                });
            }
        }
    }
    Ok(ranges
        .into_iter()
        .map(|(category, range)| SummaryRow {
            category: category.to_string(),
            energy_ratio_range: range,
            interpretation: range
                .map(|(lo, hi)| interpretation(lo, hi))
                .unwrap_or_else(|| "n/a".into()),
        })
        .collect())
}

pub fn render_summary_text(rows: &[SummaryRow]) -> String {
    let mut s =
        String::from("Summary of energy ratios.\nCategory & Energy Ratio & Interpretation\n");
    for r in rows {
        let range = match r.energy_ratio_range {
            Some((lo, hi)) if fmt3(lo) == fmt3(hi) => fmt3(lo),
            Some((lo, hi)) => format!("{}--{}", fmt3(lo), fmt3(hi)),
            None => "n/a".into(),
        };
        writeln!(s, "{} & {} & {}", r.category, range, r.interpretation).unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Pipe,
    Csv,
}

/// Full report for an analysis: one table per scenario and, when categories
/// are configured, the summary.
pub fn render_report(
    rows: &[AnalysisRow],
    param_names: &BTreeMap<String, String>,
    report_cfg: &ReportConfig,
    format: Format,
) -> Result<String, ReportError> {
    if format == Format::Csv {
        let mut buf = Vec::new();
        write_csv(rows, &mut buf).map_err(|reason| ReportError::Csv {
            path: PathBuf::from("<memory>"),
            reason,
        })?;
        return Ok(String::from_utf8(buf).expect("csv is utf-8"));
    }
    let tables = build_tables(rows);
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let param_name = param_names
            .get(&t.scenario)
            .map(String::as_str)
            .unwrap_or("param");
        out.push_str(&match format {
            Format::Pipe => render_scenario_pipe(t, param_name),
            _ => render_scenario_table(t, param_name),
        });
    }
    if !report_cfg.categories.is_empty() {
        let summary = render_summary(&tables, &report_cfg.categories, &report_cfg.summary_params)?;
        out.push('\n');
        out.push_str(&render_summary_text(&summary));
    }
    Ok(out)
}

fn write_csv<W: Write>(rows: &[AnalysisRow], out: W) -> Result<(), String> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(|e| e.to_string())?;
    for row in rows {
        let (r, lo, hi, class) = match &row.summary {
            Some(s) => (
                s.r_geo.to_string(),
                s.ci_low.to_string(),
                s.ci_high.to_string(),
                s.classification.as_str(),
            ),
            None => (String::new(), String::new(), String::new(), INSUFFICIENT),
        };
        w.write_record([
            row.scenario.as_str(),
            &row.param.to_string(),
            row.metric.as_str(),
            &row.n.to_string(),
            &r,
            &lo,
            &hi,
            class,
        ])
        .map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

/// Writes rows with unrounded values (shortest round-trip representation).
pub fn export_csv(rows: &[AnalysisRow], path: &Path) -> Result<(), ReportError> {
    let file = File::create(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(rows, file).map_err(|reason| ReportError::Csv {
        path: path.to_path_buf(),
        reason,
    })
}

/// Reads an analysis CSV back. `r_geo` and the bounds are exact; `mean_log`
/// is recovered as `ln r_geo`, `sd_log` is not stored and reads as NaN.
pub fn read_csv(path: &Path) -> Result<Vec<AnalysisRow>, ReportError> {
    let bad = |reason: String| ReportError::Csv {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| {
            field(i)
                .parse::<f64>()
                .map_err(|e| bad(format!("{e} in {rec:?}")))
        };
        let n: usize = field(3)
            .parse()
            .map_err(|e| bad(format!("{e} in {rec:?}")))?;
        let summary = if field(7) == INSUFFICIENT {
            None
        } else {
            let r_geo = num(4)?;
            Some(RatioSummary {
                r_geo,
                ci_low: num(5)?,
                ci_high: num(6)?,
                n,
                mean_log: r_geo.ln(),
                sd_log: f64::NAN,
                classification: field(7).parse::<Classification>().map_err(bad)?,
            })
        };
        rows.push(AnalysisRow {
            scenario: field(0).to_string(),
            param: field(1).parse().expect("infallible"),
            metric: field(2).parse().map_err(bad)?,
            n,
            summary,
        });
    }
    Ok(rows)
}
