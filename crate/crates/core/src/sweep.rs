//! Parameter grids: one run per grid point, summarized in a single table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::config::RunConfig;
use crate::dataset::QueryRecord;
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::eval::evaluate_method;
use crate::pipeline::{load_records, run_experiment, RunSummary};
use crate::report::{eval_records, fmt6};

pub const SWEEP_CSV: &str = "sweep.csv";

/// Values to try per parameter; an empty list keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub t: Vec<f64>,
    pub tau_emb: Vec<f64>,
    pub tau_nli: Vec<f64>,
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub k: usize,
    pub t: f64,
    pub tau_emb: f64,
    pub tau_nli: f64,
    pub lambda: f64,
    pub delta: f64,
}

impl GridPoint {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.reformulation.target_count = self.n;
        cfg.sampler.samples_per_input = self.k;
        cfg.sampler.temperature = self.t;
        cfg.hsc.tau_emb = self.tau_emb;
        cfg.hsc.tau_nli = self.tau_nli;
        cfg.hsc.lambda = self.lambda;
        cfg.hsc.delta = self.delta;
        cfg
    }
}

fn or_base<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    /// Cartesian product in row-major order (`n` varies slowest).
    pub fn points(&self, base: &RunConfig) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &n in &or_base(&self.n, base.reformulation.target_count) {
            for &k in &or_base(&self.k, base.sampler.samples_per_input) {
                for &t in &or_base(&self.t, base.sampler.temperature) {
                    for &tau_emb in &or_base(&self.tau_emb, base.hsc.tau_emb) {
                        for &tau_nli in &or_base(&self.tau_nli, base.hsc.tau_nli) {
                            for &lambda in &or_base(&self.lambda, base.hsc.lambda) {
                                for &delta in &or_base(&self.delta, base.hsc.delta) {
                                    out.push(GridPoint {
                                        n,
                                        k,
                                        t,
                                        tau_emb,
                                        tau_nli,
                                        lambda,
                                        delta,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: GridPoint,
    pub au: Option<f64>,
    pub ar: Option<f64>,
    pub f1_best: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub failed: usize,
}

/// Runs every grid point into `<output_dir>/point-<i>` and writes
/// `<output_dir>/sweep.csv` with the chosen method's metrics.
///
/// The same backend serves all points, so requests shared between points are
/// answered from its cache.
pub fn run_sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    method: Method,
    questions: &[QueryRecord],
    backend: &dyn Backend,
) -> Result<(Vec<SweepRow>, Vec<RunSummary>)> {
    let points = grid.points(base);
    let mut rows = Vec::with_capacity(points.len());
    let mut summaries = Vec::with_capacity(points.len());
    for (i, point) in points.iter().enumerate() {
        let mut cfg = point.apply(base);
        cfg.output_dir = base.output_dir.join(format!("point-{i}"));
        if !cfg.methods.contains(&method) {
            cfg.methods.push(method);
        }
        log::info!("sweep point {i}: {point:?}");
        let summary = run_experiment(&cfg, questions, backend)?;
        let records = eval_records(&load_records(&cfg.output_dir)?);
        let metrics = evaluate_method(&records, method);
        rows.push(SweepRow {
            point: *point,
            au: metrics.au,
            ar: metrics.ar,
            f1_best: metrics.f1_best,
            n_pos: metrics.n_pos,
            n_neg: metrics.n_neg,
            failed: summary.failed,
        });
        summaries.push(summary);
    }
    write_sweep_csv(&base.output_dir.join(SWEEP_CSV), method, &rows)?;
    Ok((rows, summaries))
}

pub fn write_sweep_csv(path: &Path, method: Method, rows: &[SweepRow]) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "method", "N", "K", "T", "tau_emb", "tau_nli", "lambda", "delta", "AU", "AR", "F1@Best", "n_pos", "n_neg",
        "failed",
    ])
    .map_err(io)?;
    for r in rows {
        let p = &r.point;
        w.write_record([
            method.to_string(),
            p.n.to_string(),
            p.k.to_string(),
            p.t.to_string(),
            p.tau_emb.to_string(),
            p.tau_nli.to_string(),
            p.lambda.to_string(),
            p.delta.to_string(),
            fmt6(r.au),
            fmt6(r.ar),
            fmt6(r.f1_best),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
            r.failed.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
