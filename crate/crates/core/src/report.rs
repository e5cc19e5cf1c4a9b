//! Metric tables and score exports for a finished run.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::eval::{evaluate, scored_pairs, separation, EvalRecord, MetricReport, Separation};
use crate::pipeline::{load_records, RunRecord};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const DISTRIBUTIONS_CSV: &str = "distributions.csv";

pub fn eval_records(records: &[RunRecord]) -> Vec<EvalRecord> {
    records
        .iter()
        .map(|r| EvalRecord {
            query_id: r.query_id.clone(),
            h: r.h,
            scores: r.scores.clone(),
        })
        .collect()
}

/// Methods present in any record, in canonical order.
pub fn methods_in(records: &[EvalRecord]) -> Vec<Method> {
    records
        .iter()
        .flat_map(|r| r.scores.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Six-decimal rendering; absent values become empty cells.
pub fn fmt6(x: Option<f64>) -> String {
    match x {
        Some(v) => {
            let s = format!("{v:.6}");
            if s == "-0.000000" {
                "0.000000".into()
            } else {
                s
            }
        }
        None => String::new(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub records: usize,
    pub metrics: Vec<MetricReport>,
    pub separation: Vec<Separation>,
}

pub fn build_report(records: &[EvalRecord]) -> Result<Report> {
    if records.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a report needs at least 2 records, got {}",
            records.len()
        )));
    }
    let methods = methods_in(records);
    let metrics = evaluate(records, &methods);
    for m in &metrics {
        if m.n_pos == 0 || m.n_neg == 0 {
            log::warn!("{}: only one label class present, metrics left empty", m.method);
        }
    }
    Ok(Report {
        records: records.len(),
        separation: methods.iter().map(|&m| separation(records, m)).collect(),
        metrics,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, metrics: &[MetricReport]) -> Result<()> {
    let rows = metrics
        .iter()
        .map(|m| {
            vec![
                m.method.to_string(),
                fmt6(m.au),
                fmt6(m.ar),
                fmt6(m.f1_best),
                fmt6(m.threshold),
                m.n_pos.to_string(),
                m.n_neg.to_string(),
                m.note.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["method", "AU", "AR", "F1@Best", "threshold", "n_pos", "n_neg", "note"],
        rows,
    )
}

fn write_scores_csv(path: &Path, records: &[EvalRecord], methods: &[Method]) -> Result<()> {
    let mut rows = Vec::new();
    for &m in methods {
        for r in records {
            if let Some(Some(s)) = r.scores.get(&m) {
                rows.push(vec![m.to_string(), r.query_id.clone(), fmt6(Some(*s)), r.h.to_string()]);
            }
        }
    }
    write_csv(path, &["method", "query_id", "score", "h"], rows)
}

fn write_distributions_csv(path: &Path, records: &[EvalRecord], separation: &[Separation]) -> Result<()> {
    let rows = separation
        .iter()
        .map(|s| {
            let (_, labels) = scored_pairs(records, s.method);
            let n_pos = labels.iter().filter(|&&l| l == 1).count();
            vec![
                s.method.to_string(),
                fmt6(s.cohens_d),
                fmt6(s.wasserstein),
                fmt6(s.ks),
                n_pos.to_string(),
                (labels.len() - n_pos).to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["method", "cohens_d", "wasserstein", "ks", "n_pos", "n_neg"],
        rows,
    )
}

/// Writes `metrics.csv`, `metrics.json`, `scores.csv` and `distributions.csv`
/// for the run in `run_dir` into `out_dir`.
pub fn write_report(run_dir: &Path, out_dir: &Path) -> Result<Report> {
    let records = eval_records(&load_records(run_dir)?);
    let report = build_report(&records)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let methods: Vec<Method> = report.metrics.iter().map(|m| m.method).collect();
    write_metrics_csv(&out_dir.join(METRICS_CSV), &report.metrics)?;
    let json_path = out_dir.join(METRICS_JSON);
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    write_scores_csv(&out_dir.join(SCORES_CSV), &records, &methods)?;
    write_distributions_csv(&out_dir.join(DISTRIBUTIONS_CSV), &records, &report.separation)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, h: u8, se: f64, sre: f64) -> EvalRecord {
        EvalRecord {
            query_id: id.into(),
            h,
            scores: [(Method::Se, Some(se)), (Method::SreSrHsc, Some(sre))]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn one_row_per_method_and_perfect_separation() {
        let records = vec![
            rec("a", 1, 0.5, 1.2),
            rec("b", 0, 0.6, 0.1),
            rec("c", 1, 0.2, 0.9),
            rec("d", 0, 0.1, 0.0),
        ];
        let report = build_report(&records).unwrap();
        assert_eq!(report.metrics.len(), 2);
        let sre = report.metrics.iter().find(|m| m.method == Method::SreSrHsc).unwrap();
        assert_eq!(sre.au, Some(1.0));
    }

    #[test]
    fn single_class_rows_are_empty() {
        let records = vec![rec("a", 0, 0.5, 1.2), rec("b", 0, 0.6, 0.1)];
        let report = build_report(&records).unwrap();
        assert!(report.metrics.iter().all(|m| m.au.is_none() && m.note.is_some()));
        assert!(build_report(&records[..1]).is_err());
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let report = build_report(&[rec("a", 1, 0.5, 1.2), rec("b", 0, 0.6, 0.1)]).unwrap();
        write_metrics_csv(&path, &report.metrics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "method,AU,AR,F1@Best,threshold,n_pos,n_neg,note");
        assert_eq!(lines.next().unwrap(), "SE,0.000000,0.250000,0.666667,0.500000,1,1,");
        assert_eq!(fmt6(Some(-0.0000001)), "0.000000");
    }
}
