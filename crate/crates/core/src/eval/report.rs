//! Markdown and CSV rendering of metric reports and sweep tables.
//!
//! CSV columns (metric reports): `label, n, accuracy, precision, recall, f1,
//! tp, fp, fn, tn, retrieval_fraction, mean_generation_calls,
//! mean_backend_calls, undefined`. Rates are fractions in `[0, 1]` written
//! with full round-trip precision; `undefined` lists metrics whose
//! denominator was zero, separated by `|`.
//!
//! CSV columns (sweeps): `theta, retrieval_fraction, accuracy, f1,
//! mean_generation_calls`.
//!
//! Markdown tables show rates as percentages with two decimals.

use serde::{Deserialize, Serialize};

use super::metrics::{MetricReport, UndefinedFlags};
use super::sweep::SweepRow;
use crate::error::{Error, Result};

pub const REPORT_COLUMNS: [&str; 14] = [
    "label",
    "n",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "tp",
    "fp",
    "fn",
    "tn",
    "retrieval_fraction",
    "mean_generation_calls",
    "mean_backend_calls",
    "undefined",
];

pub const SWEEP_COLUMNS: [&str; 5] = ["theta", "retrieval_fraction", "accuracy", "f1", "mean_generation_calls"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format '{other}' (md or csv)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub report: MetricReport,
    pub mean_generation_calls: f64,
    pub mean_backend_calls: f64,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn markdown(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}

pub fn emit_report(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => csv_text(
            &REPORT_COLUMNS,
            rows.iter().map(|r| {
                let m = &r.report;
                vec![
                    r.label.clone(),
                    m.n().to_string(),
                    m.accuracy.to_string(),
                    m.precision.to_string(),
                    m.recall.to_string(),
                    m.f1.to_string(),
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                    m.tn.to_string(),
                    m.retrieval_fraction.to_string(),
                    r.mean_generation_calls.to_string(),
                    r.mean_backend_calls.to_string(),
                    m.undefined.render(),
                ]
            }),
        ),
        ReportFormat::Markdown => Ok(markdown(
            &REPORT_COLUMNS,
            rows.iter().map(|r| {
                let m = &r.report;
                vec![
                    r.label.replace('|', "\\|"),
                    m.n().to_string(),
                    pct(m.accuracy),
                    pct(m.precision),
                    pct(m.recall),
                    pct(m.f1),
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                    m.tn.to_string(),
                    pct(m.retrieval_fraction),
                    format!("{:.2}", r.mean_generation_calls),
                    format!("{:.2}", r.mean_backend_calls),
                    m.undefined.render().replace('|', ", "),
                ]
            }),
        )),
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .ok_or_else(|| Error::Parse(format!("missing column {}", REPORT_COLUMNS.get(i).unwrap_or(&"?"))))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad value in column {i}")))
}

/// Parses CSV produced by [`emit_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if header.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Parse("unexpected report columns".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let report = MetricReport {
            accuracy: field(&rec, 2)?,
            precision: field(&rec, 3)?,
            recall: field(&rec, 4)?,
            f1: field(&rec, 5)?,
            tp: field(&rec, 6)?,
            fp: field(&rec, 7)?,
            fn_: field(&rec, 8)?,
            tn: field(&rec, 9)?,
            retrieval_fraction: field(&rec, 10)?,
            undefined: UndefinedFlags::parse(rec.get(13).unwrap_or_default())?,
        };
        rows.push(ReportRow {
            label: field(&rec, 0)?,
            report,
            mean_generation_calls: field(&rec, 11)?,
            mean_backend_calls: field(&rec, 12)?,
        });
    }
    Ok(rows)
}

pub fn emit_sweep(rows: &[SweepRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => csv_text(
            &SWEEP_COLUMNS,
            rows.iter().map(|r| {
                vec![
                    r.theta.to_string(),
                    r.retrieval_fraction.to_string(),
                    r.accuracy.to_string(),
                    r.f1.to_string(),
                    r.mean_generation_calls.to_string(),
                ]
            }),
        ),
        ReportFormat::Markdown => Ok(markdown(
            &SWEEP_COLUMNS,
            rows.iter().map(|r| {
                vec![
                    format!("{:.4}", r.theta),
                    pct(r.retrieval_fraction),
                    pct(r.accuracy),
                    pct(r.f1),
                    format!("{:.2}", r.mean_generation_calls),
                ]
            }),
        )),
    }
}

/// Parses CSV produced by [`emit_sweep`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse(format!("bad sweep column {i}")))
        };
        rows.push(SweepRow {
            theta: num(0)?,
            retrieval_fraction: num(1)?,
            accuracy: num(2)?,
            f1: num(3)?,
            mean_generation_calls: num(4)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ReportRow {
        ReportRow {
            label: "probability_level, a=0.8".into(),
            report: MetricReport::from_counts(7, 1, 2, 3, 1.0 / 3.0),
            mean_generation_calls: 2.2,
            mean_backend_calls: 10.0 / 3.0,
        }
    }

    #[test]
    fn csv_single_row() {
        let csv = emit_report(&[row()], ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(parse_report_csv(&csv).unwrap(), vec![row()]);
    }

    #[test]
    fn markdown_columns() {
        let md = emit_report(&[row()], ReportFormat::Markdown).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in [lines[0], lines[2]] {
            assert_eq!(line.matches(" | ").count() + 1, REPORT_COLUMNS.len(), "{line}");
        }
        assert_eq!(lines[1].matches("---|").count(), REPORT_COLUMNS.len());
        assert!(md.contains("| 76.92 |"));
    }

    #[test]
    fn undefined_flags_survive() {
        let mut r = row();
        r.report = MetricReport::from_counts(0, 0, 5, 5, 0.0);
        let csv = emit_report(&[r.clone()], ReportFormat::Csv).unwrap();
        assert!(csv.contains("precision|f1"));
        assert_eq!(parse_report_csv(&csv).unwrap(), vec![r]);
    }

    #[test]
    fn sweep_round_trip() {
        let rows = vec![
            SweepRow { theta: -0.5, retrieval_fraction: 1.0 / 3.0, accuracy: 0.7, f1: 0.6, mean_generation_calls: 1.0 },
            SweepRow { theta: 0.1, retrieval_fraction: 0.4, accuracy: 0.99, f1: 0.98, mean_generation_calls: 3.4 },
        ];
        let csv = emit_sweep(&rows, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().next().unwrap(), SWEEP_COLUMNS.join(","));
        assert_eq!(parse_sweep_csv(&csv).unwrap(), rows);
        let md = emit_sweep(&rows, ReportFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), 4);
    }
}
