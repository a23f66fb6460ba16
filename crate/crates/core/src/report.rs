//! k-anonymous aggregate reports. Every emitted table is built through
//! [`Report::build`], which drops rows backed by fewer than `k` distinct users
//! and records only how many were dropped.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("report {report}: {reason}")]
    Shape { report: String, reason: String },
    #[error("metric {name} is not finite")]
    NonFinite { name: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub group_keys: Vec<(String, String)>,
    /// Distinct users behind the row.
    pub count: u64,
    pub metrics: Vec<(String, f64)>,
}

impl AggregateRow {
    pub fn new(group_keys: Vec<(&str, String)>, count: u64, metrics: Vec<(&str, f64)>) -> Self {
        AggregateRow {
            group_keys: group_keys.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            count,
            metrics: metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

/// Keep rows with `count >= k`; return them with the number dropped.
pub fn k_suppress(rows: Vec<AggregateRow>, k: u64) -> (Vec<AggregateRow>, usize) {
    let before = rows.len();
    let kept: Vec<AggregateRow> = rows.into_iter().filter(|r| r.count >= k).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Numbers sort numerically and before text; equal numbers fall back to text.
pub fn compare_key_values(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn compare_rows(a: &AggregateRow, b: &AggregateRow) -> Ordering {
    for ((_, x), (_, y)) in a.group_keys.iter().zip(&b.group_keys) {
        let o = compare_key_values(x, y);
        if o != Ordering::Equal {
            return o;
        }
    }
    a.group_keys.len().cmp(&b.group_keys.len())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub k: u64,
    /// Named input record counts, in the order given.
    pub inputs: Vec<(String, u64)>,
    pub suppressed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub key_dims: Vec<String>,
    pub metric_names: Vec<String>,
    pub rows: Vec<AggregateRow>,
    pub meta: ReportMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(ReportFormat::Csv),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }
}

const COUNT_COLUMN: &str = "count";

impl Report {
    /// Validate row shapes, suppress, and sort by group keys.
    pub fn build(
        name: &str,
        key_dims: &[&str],
        metric_names: &[&str],
        rows: Vec<AggregateRow>,
        k: u64,
        config_hash: &str,
        inputs: Vec<(String, u64)>,
    ) -> Result<Self, ReportError> {
        if k == 0 {
            return Err(ReportError::ZeroK);
        }
        let shape = |reason: String| ReportError::Shape {
            report: name.to_string(),
            reason,
        };
        let mut cols: Vec<&str> = key_dims.iter().chain(metric_names).copied().collect();
        cols.push(COUNT_COLUMN);
        let n = cols.len();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() != n {
            return Err(shape("duplicate column name".into()));
        }
        for r in &rows {
            if r.group_keys.iter().map(|(d, _)| d.as_str()).ne(key_dims.iter().copied()) {
                return Err(shape(format!("row keys {:?} do not match {:?}", r.group_keys, key_dims)));
            }
            if r.metrics.iter().map(|(m, _)| m.as_str()).ne(metric_names.iter().copied()) {
                return Err(shape(format!("row metrics do not match {metric_names:?}")));
            }
            if let Some((m, _)) = r.metrics.iter().find(|(_, v)| !v.is_finite()) {
                return Err(ReportError::NonFinite { name: m.clone() });
            }
        }
        let (mut kept, dropped) = k_suppress(rows, k);
        kept.sort_by(compare_rows);
        Ok(Report {
            name: name.to_string(),
            key_dims: key_dims.iter().map(|s| s.to_string()).collect(),
            metric_names: metric_names.iter().map(|s| s.to_string()).collect(),
            rows: kept,
            meta: ReportMeta {
                config_hash: config_hash.to_string(),
                k,
                inputs,
                suppressed: dropped as u64,
            },
        })
    }

    pub fn render(&self, format: ReportFormat) -> Result<String, ReportError> {
        match format {
            ReportFormat::Csv => self.render_csv(),
            ReportFormat::Json => self.render_json(),
        }
    }

    fn render_csv(&self) -> Result<String, ReportError> {
        let mut head = format!("# report={}\n# config_hash={}\n# k={}\n", self.name, self.meta.config_hash, self.meta.k);
        for (name, n) in &self.meta.inputs {
            head.push_str(&format!("# input.{name}={n}\n"));
        }
        head.push_str(&format!("# suppressed={}\n", self.meta.suppressed));

        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let header: Vec<&str> = self
            .key_dims
            .iter()
            .map(String::as_str)
            .chain([COUNT_COLUMN])
            .chain(self.metric_names.iter().map(String::as_str))
            .collect();
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.group_keys.iter().map(|(_, v)| v.clone()).collect();
            rec.push(r.count.to_string());
            rec.extend(r.metrics.iter().map(|(_, v)| v.to_string()));
            w.write_record(&rec)?;
        }
        let body = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
        head.push_str(std::str::from_utf8(&body).expect("csv output of utf-8 input"));
        Ok(head)
    }

    fn render_json(&self) -> Result<String, ReportError> {
        let doc = JsonReport {
            report: self.name.clone(),
            meta: self.meta.clone(),
            key_dims: self.key_dims.clone(),
            metric_names: self.metric_names.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| JsonRow {
                    keys: r.group_keys.iter().map(|(_, v)| v.clone()).collect(),
                    count: r.count,
                    metrics: r.metrics.iter().map(|(_, v)| *v).collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }

    fn from_parts(
        name: String,
        meta: ReportMeta,
        key_dims: Vec<String>,
        metric_names: Vec<String>,
        rows: Vec<(Vec<String>, u64, Vec<f64>)>,
    ) -> Self {
        let rows = rows
            .into_iter()
            .map(|(keys, count, metrics)| AggregateRow {
                group_keys: key_dims.iter().cloned().zip(keys).collect(),
                count,
                metrics: metric_names.iter().cloned().zip(metrics).collect(),
            })
            .collect();
        Report {
            name,
            key_dims,
            metric_names,
            rows,
            meta,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    report: String,
    meta: ReportMeta,
    key_dims: Vec<String>,
    metric_names: Vec<String>,
    rows: Vec<JsonRow>,
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    keys: Vec<String>,
    count: u64,
    metrics: Vec<f64>,
}

/// Write `report` to `path` in `format`.
pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<(), ReportError> {
    let text = report.render(format)?;
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_report(text: &str, format: ReportFormat) -> Result<Report, ReportError> {
    match format {
        ReportFormat::Csv => parse_csv_report(text),
        ReportFormat::Json => parse_json_report(text),
    }
}

pub fn parse_json_report(text: &str) -> Result<Report, ReportError> {
    let doc: JsonReport = serde_json::from_str(text)?;
    let rows = doc.rows.into_iter().map(|r| (r.keys, r.count, r.metrics)).collect();
    Ok(Report::from_parts(doc.report, doc.meta, doc.key_dims, doc.metric_names, rows))
}

pub fn parse_csv_report(text: &str) -> Result<Report, ReportError> {
    let bad = |line: usize, reason: &str| ReportError::Parse {
        line,
        reason: reason.to_string(),
    };
    let mut name = None;
    let mut meta = ReportMeta::default();
    let mut body_start = 0;
    let mut n_meta = 0;
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix("# ") else { break };
        body_start += line.len() + 1;
        n_meta += 1;
        let (k, v) = rest.split_once('=').ok_or_else(|| bad(i + 1, "metadata line without '='"))?;
        let num = || v.parse::<u64>().map_err(|_| bad(i + 1, "metadata value is not a count"));
        match k {
            "report" => name = Some(v.to_string()),
            "config_hash" => meta.config_hash = v.to_string(),
            "k" => meta.k = num()?,
            "suppressed" => meta.suppressed = num()?,
            _ => match k.strip_prefix("input.") {
                Some(input) => meta.inputs.push((input.to_string(), num()?)),
                None => return Err(bad(i + 1, "unknown metadata key")),
            },
        }
    }
    let name = name.ok_or_else(|| bad(1, "missing report name"))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(&text.as_bytes()[body_start.min(text.len())..]);
    let header = rdr.headers()?.clone();
    let count_at = header
        .iter()
        .position(|h| h == COUNT_COLUMN)
        .ok_or_else(|| bad(n_meta + 1, "no count column"))?;
    let key_dims: Vec<String> = header.iter().take(count_at).map(str::to_string).collect();
    let metric_names: Vec<String> = header.iter().skip(count_at + 1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n_meta + 2 + i;
        if rec.len() != header.len() {
            return Err(bad(line, "wrong column count"));
        }
        let keys = rec.iter().take(count_at).map(str::to_string).collect();
        let count = rec[count_at].parse().map_err(|_| bad(line, "count is not an integer"))?;
        let metrics = rec
            .iter()
            .skip(count_at + 1)
            .map(|v| v.parse::<f64>().map_err(|_| bad(line, "metric is not a number")))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((keys, count, metrics));
    }
    Ok(Report::from_parts(name, meta, key_dims, metric_names, rows))
}
