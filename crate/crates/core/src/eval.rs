//! Detection metrics with hallucination (`h = 1`) as the positive class, and
//! two-sample distribution diagnostics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Method;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no samples".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((n_pos, labels.len() - n_pos))
}

fn check_both_classes(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Indices ordered by descending score, ties kept in input order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Probability that a random positive scores above a random negative, with
/// ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check_both_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney count, so ties stay integral
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        let neg = (end - start) as u64 - pos;
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        start = end;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Mean hallucination rate among the `k` most uncertain samples, over
/// `k = n, ..., 1`.
pub fn aurac_variant(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let order = descending_order(scores);
    let mut kept_pos = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        kept_pos += usize::from(labels[i]);
        sum += kept_pos as f64 / (k + 1) as f64;
    }
    Ok(sum / scores.len() as f64)
}

/// Best F1 over thresholds at the distinct scores, predicting positive when
/// `score >= t`. Equal F1 values resolve to the larger threshold.
pub fn f1_at_best(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let (n_pos, _) = check_inputs(scores, labels)?;
    let order = descending_order(scores);
    // F1 = 2tp / (2tp + fp + fn), kept as a fraction for exact comparison
    let mut best: Option<(u64, u64, f64)> = None;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut idx = 0;
    while idx < order.len() {
        let t = scores[order[idx]];
        while idx < order.len() && scores[order[idx]] == t {
            if labels[order[idx]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        let fn_ = n_pos as u64 - tp;
        let (num, den) = (2 * tp, 2 * tp + fp + fn_);
        let better = match best {
            None => true,
            Some((bn, bd, _)) => (num as u128 * bd as u128).cmp(&(bn as u128 * den as u128)) == Ordering::Greater,
        };
        if better {
            best = Some((num, den, t));
        }
    }
    let (num, den, t) = best.expect("non-empty input has a threshold");
    Ok((num as f64 / den as f64, t))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standardized mean difference with the pooled sample standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedMetric("Cohen's d needs two values per group".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0)).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::UndefinedMetric("zero pooled standard deviation".into()));
    }
    Ok((mean(a) - mean(b)) / pooled)
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in sample".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Walks the merged support of two samples, yielding each breakpoint with the
/// empirical CDFs just after it.
fn cdf_steps(a: &[f64], b: &[f64]) -> Vec<(f64, f64, f64)> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut steps = Vec::with_capacity(a.len() + b.len());
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        steps.push((x, i as f64 / na, j as f64 / nb));
    }
    steps
}

/// Earth mover's distance between two empirical distributions on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let steps = cdf_steps(&a, &b);
    Ok(steps
        .windows(2)
        .map(|w| (w[0].1 - w[0].2).abs() * (w[1].0 - w[0].0))
        .sum())
}

/// Largest gap between the two empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    Ok(cdf_steps(&a, &b)
        .into_iter()
        .map(|(_, fa, fb)| (fa - fb).abs())
        .fold(0.0, f64::max))
}

/// One question's label and per-method scores; `None` marks a score that
/// could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub h: u8,
    pub scores: BTreeMap<Method, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub au: Option<f64>,
    pub ar: Option<f64>,
    pub f1_best: Option<f64>,
    pub threshold: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub note: Option<String>,
}

/// Scores and labels of the records that carry a score for `method`.
pub fn scored_pairs(records: &[EvalRecord], method: Method) -> (Vec<f64>, Vec<u8>) {
    records
        .iter()
        .filter_map(|r| r.scores.get(&method).copied().flatten().map(|s| (s, r.h)))
        .unzip()
}

pub fn evaluate_method(records: &[EvalRecord], method: Method) -> MetricReport {
    let (scores, labels) = scored_pairs(records, method);
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    let missing = records.len() - scores.len();
    let mut notes = Vec::new();
    if missing > 0 {
        notes.push(format!("{missing} records without a score"));
    }
    let mut report = MetricReport {
        method,
        au: None,
        ar: None,
        f1_best: None,
        threshold: None,
        n_pos,
        n_neg,
        note: None,
    };
    if n_pos == 0 || n_neg == 0 {
        notes.push("single class".to_string());
    } else {
        report.au = auroc(&scores, &labels).ok();
        report.ar = aurac_variant(&scores, &labels).ok();
        if let Ok((f1, t)) = f1_at_best(&scores, &labels) {
            report.f1_best = Some(f1);
            report.threshold = Some(t);
        }
    }
    if !notes.is_empty() {
        report.note = Some(notes.join("; "));
    }
    report
}

pub fn evaluate(records: &[EvalRecord], methods: &[Method]) -> Vec<MetricReport> {
    methods.iter().map(|&m| evaluate_method(records, m)).collect()
}

/// How far apart the score distributions of hallucinated and faithful
/// answers lie.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub method: Method,
    pub cohens_d: Option<f64>,
    pub wasserstein: Option<f64>,
    pub ks: Option<f64>,
}

pub fn separation(records: &[EvalRecord], method: Method) -> Separation {
    let (scores, labels) = scored_pairs(records, method);
    let pick = |h: u8| -> Vec<f64> {
        scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == h)
            .map(|(&s, _)| s)
            .collect()
    };
    let (pos, neg) = (pick(1), pick(0));
    Separation {
        method,
        cohens_d: cohens_d(&pos, &neg).ok(),
        wasserstein: wasserstein_1d(&pos, &neg).ok(),
        ks: ks_statistic(&pos, &neg).ok(),
    }
}
