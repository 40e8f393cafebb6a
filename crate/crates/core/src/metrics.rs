//! AUROC, F1, AIR, Mann-Whitney U and paired bootstrap significance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::model::{RoutingMode, RoutingOutcome, TaskKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("AUROC needs at least one positive and one negative")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("intervention F1 is zero; AIR undefined")]
    ZeroIntervention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub label: bool,
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auroc(samples: &[LabeledScore]) -> Result<f64, MetricsError> {
    if let Some(i) = samples.iter().position(|s| !s.score.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let n_pos = samples.iter().filter(|s| s.label).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = samples
        .iter()
        .zip(&ranks)
        .filter(|(s, _)| s.label)
        .map(|(_, r)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub value: f64,
    /// Precision + recall was zero and the score was defined as 0.
    pub degenerate: bool,
}

pub fn f1(predictions: &[bool], labels: &[bool]) -> Result<F1Score, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    // 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN); zero exactly when P+R is.
    if tp == 0 {
        return Ok(F1Score {
            value: 0.0,
            degenerate: true,
        });
    }
    let tp = tp as f64;
    Ok(F1Score {
        value: 2.0 * tp / (2.0 * tp + fp as f64 + fneg as f64),
        degenerate: false,
    })
}

pub fn air(f1_auto: f64, f1_inter: f64) -> Result<f64, MetricsError> {
    if f1_inter <= 0.0 {
        return Err(MetricsError::ZeroIntervention);
    }
    Ok(f1_auto / f1_inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Pairs where A exceeds B, ties counting one half.
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided normal approximation with tie and continuity correction.
    pub p_value: f64,
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    if let Some(i) = pooled.iter().position(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let ranks = average_ranks(&pooled);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u_a = r1 - n1 * (n1 + 1.0) / 2.0;
    let u_b = n1 * n2 - u_a;

    let n = n1 + n2;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p_value = if var <= 0.0 || !var.is_finite() {
        1.0
    } else {
        let mean = n1 * n2 / 2.0;
        let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(MannWhitney { u_a, u_b, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Share of resamples where the variant does not beat the baseline;
    /// exact ties count one half.
    pub p_value: f64,
    pub valid: usize,
    /// Resamples skipped because they held a single class or the metric
    /// was undefined.
    pub skipped: usize,
}

/// Paired bootstrap of case indices: each resample draws the same indices
/// for baseline and variant. Iteration `i` uses its own ChaCha stream
/// `(seed, i)`, so the result is independent of thread scheduling.
pub fn bootstrap_pvalue<F>(
    metric: F,
    baseline: &[f64],
    variant: &[f64],
    labels: &[bool],
    iterations: usize,
    seed: u64,
) -> Result<BootstrapResult, MetricsError>
where
    F: Fn(&[f64], &[bool]) -> Option<f64> + Sync,
{
    if baseline.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(baseline.len(), labels.len()));
    }
    if variant.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(variant.len(), labels.len()));
    }
    if labels.is_empty() || iterations == 0 {
        return Err(MetricsError::Empty);
    }
    let n = labels.len();
    // (below, ties) per valid iteration; None when skipped
    let outcomes: Vec<Option<(bool, bool)>> = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(it as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            if l.iter().all(|x| *x) || l.iter().all(|x| !*x) {
                return None;
            }
            let b: Vec<f64> = idx.iter().map(|&i| baseline[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| variant[i]).collect();
            let diff = metric(&v, &l)? - metric(&b, &l)?;
            Some((diff < 0.0, diff == 0.0))
        })
        .collect();
    let valid = outcomes.iter().flatten().count();
    let skipped = iterations - valid;
    if valid == 0 {
        return Err(MetricsError::SingleClass);
    }
    let score: f64 = outcomes
        .iter()
        .flatten()
        .map(|(below, tie)| if *below { 1.0 } else if *tie { 0.5 } else { 0.0 })
        .sum();
    Ok(BootstrapResult {
        p_value: score / valid as f64,
        valid,
        skipped,
    })
}

/// Bootstrap adapter: AUROC over scores, `None` when undefined.
pub fn auroc_metric(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let samples: Vec<LabeledScore> = scores
        .iter()
        .zip(labels)
        .map(|(s, l)| LabeledScore {
            score: *s,
            label: *l,
        })
        .collect();
    auroc(&samples).ok()
}

/// Bootstrap adapter: F1 of `score >= 0.5`.
pub fn f1_metric(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let preds: Vec<bool> = scores.iter().map(|s| *s >= 0.5).collect();
    f1(&preds, labels).ok().map(|f| f.value)
}

/// F1 of the preliminary decision on each routing split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub f1_autonomous: Option<f64>,
    pub f1_intervention: Option<f64>,
    /// Present only when both splits are non-empty and intervention F1 > 0.
    pub air: Option<f64>,
    pub n_autonomous: usize,
    pub n_intervention: usize,
}

/// One task's row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
    pub f1_auto: Option<f64>,
    pub f1_inter: Option<f64>,
    pub air: Option<f64>,
    pub n_escalated: usize,
    pub n_total: usize,
}

pub type MetricsReport = BTreeMap<TaskKind, TaskMetrics>;

struct Row {
    score: f64,
    label: bool,
    escalated: bool,
}

fn split_f1(rows: &[&Row]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let p: Vec<bool> = rows.iter().map(|r| r.score >= 0.5).collect();
    let l: Vec<bool> = rows.iter().map(|r| r.label).collect();
    f1(&p, &l).ok().map(|f| f.value)
}

/// Per-task split evaluation of preliminary decisions against ground truth.
/// Outcomes without a label for a task are ignored for that task.
pub fn evaluate_outcomes<'a, I>(outcomes: I) -> BTreeMap<TaskKind, (SplitEvaluation, TaskMetrics)>
where
    I: IntoIterator<Item = (&'a RoutingOutcome, &'a BTreeMap<TaskKind, bool>)>,
{
    let mut rows: BTreeMap<TaskKind, Vec<Row>> = BTreeMap::new();
    for (outcome, truth) in outcomes {
        for (task, score) in &outcome.preliminary.per_task_scores {
            if let Some(label) = truth.get(task) {
                rows.entry(task.clone()).or_default().push(Row {
                    score: *score,
                    label: *label,
                    escalated: outcome.mode == RoutingMode::Escalated,
                });
            }
        }
    }
    rows.into_iter()
        .map(|(task, rows)| {
            let auto: Vec<&Row> = rows.iter().filter(|r| !r.escalated).collect();
            let inter: Vec<&Row> = rows.iter().filter(|r| r.escalated).collect();
            let f1_auto = split_f1(&auto);
            let f1_inter = split_f1(&inter);
            let air_value = match (f1_auto, f1_inter) {
                (Some(a), Some(i)) => air(a, i).ok(),
                _ => None,
            };
            let all: Vec<&Row> = rows.iter().collect();
            let samples: Vec<LabeledScore> = rows
                .iter()
                .map(|r| LabeledScore {
                    score: r.score,
                    label: r.label,
                })
                .collect();
            let split = SplitEvaluation {
                f1_autonomous: f1_auto,
                f1_intervention: f1_inter,
                air: air_value,
                n_autonomous: auto.len(),
                n_intervention: inter.len(),
            };
            let metrics = TaskMetrics {
                auroc: auroc(&samples).ok(),
                f1: split_f1(&all),
                f1_auto,
                f1_inter,
                air: air_value,
                n_escalated: inter.len(),
                n_total: rows.len(),
            };
            (task, (split, metrics))
        })
        .collect()
}

pub fn metrics_report<'a, I>(outcomes: I) -> MetricsReport
where
    I: IntoIterator<Item = (&'a RoutingOutcome, &'a BTreeMap<TaskKind, bool>)>,
{
    evaluate_outcomes(outcomes)
        .into_iter()
        .map(|(t, (_, m))| (t, m))
        .collect()
}
