//! Logit distance distribution summaries and the two-threshold decision
//! rule.
//!
//! A request's LDD is the multiset of per-step distances produced by
//! [`crate::metrics::measure_trace`]. The verdict rule has two thresholds:
//! `t1` cuts individual step distances, `t2` cuts the fraction of steps
//! exceeding `t1`. A request is flagged iff `frac(value > t1) > t2`, both
//! inequalities strict, so `t2 = 0` flags any request with even one step
//! above `t1` and a benign zero-distance request is never flagged.

use crate::metrics::DistanceSample;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LddError {
    #[error("empty sample set")]
    Empty,
    #[error("bins must be at least 2, got {0}")]
    BadBins(usize),
    #[error("invalid threshold: {0}")]
    BadThreshold(&'static str),
}

/// Fraction of samples strictly above `t1`. The token-stream decision rule
/// evaluates TV distances; expert-routing steps are kept out by the caller.
pub fn tail_statistic(samples: &[f64], t1: f64) -> Result<f64, LddError> {
    if samples.is_empty() {
        return Err(LddError::Empty);
    }
    if !t1.is_finite() {
        return Err(LddError::BadThreshold("t1 must be finite"));
    }
    let above = samples.iter().filter(|&&v| v > t1).count();
    Ok(above as f64 / samples.len() as f64)
}

/// Outcome of the decision rule on one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestVerdict {
    pub p_t1: f64,
    pub t1: f64,
    pub t2: f64,
    pub flagged: bool,
    pub num_steps: usize,
}

/// Applies the two-threshold rule to one request's distance samples.
pub fn decide(samples: &[f64], t1: f64, t2: f64) -> Result<RequestVerdict, LddError> {
    if !t2.is_finite() || t2 < 0.0 {
        return Err(LddError::BadThreshold("t2 must be finite and non-negative"));
    }
    let p_t1 = tail_statistic(samples, t1)?;
    Ok(RequestVerdict { p_t1, t1, t2, flagged: p_t1 > t2, num_steps: samples.len() })
}

/// Histogram of distance values with standing tail probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bin_edges.len() == counts.len() + 1`; first edge 0, last edge covers
    /// the maximum observed value.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: f64,
    pub max: f64,
    /// Tail mass above reference thresholds, keyed by the threshold's
    /// decimal rendering.
    pub tail_probs: BTreeMap<String, f64>,
}

/// Reference thresholds reported by every histogram.
pub const TAIL_THRESHOLDS: [f64; 3] = [0.1, 0.2, 0.3];

fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Builds an equal-width histogram over `[0, max(1, max_value)]`.
pub fn build_histogram(values: &[f64], bins: usize) -> Result<Histogram, LddError> {
    if values.is_empty() {
        return Err(LddError::Empty);
    }
    if bins < 2 {
        return Err(LddError::BadBins(bins));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let hi = max.max(1.0);
    let width = hi / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = ((v / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut tail_probs = BTreeMap::new();
    for t in TAIL_THRESHOLDS {
        tail_probs.insert(threshold_key(t), tail_statistic(values, t)?);
    }
    Ok(Histogram { bin_edges, counts, total: values.len() as u64, mean, max, tail_probs })
}

/// Plucks the raw values out of measured samples.
pub fn values(samples: &[DistanceSample]) -> Vec<f64> {
    samples.iter().map(|s| s.value).collect()
}

/// [`tail_statistic`] over measured samples.
pub fn tail_statistic_samples(samples: &[DistanceSample], t1: f64) -> Result<f64, LddError> {
    tail_statistic(&values(samples), t1)
}

/// [`decide`] over measured samples.
pub fn decide_samples(
    samples: &[DistanceSample],
    t1: f64,
    t2: f64,
) -> Result<RequestVerdict, LddError> {
    decide(&values(samples), t1, t2)
}

/// [`build_histogram`] over measured samples.
pub fn build_histogram_samples(
    samples: &[DistanceSample],
    bins: usize,
) -> Result<Histogram, LddError> {
    build_histogram(&values(samples), bins)
}

/// One row of a separation report: benign vs attack tail mass at `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub tau: f64,
    pub benign_tail: f64,
    pub attack_tail: f64,
    /// `attack_tail / benign_tail`; `None` when the benign tail is zero and
    /// the attack tail is not (infinite separation). Both zero gives 1.
    pub ratio: Option<f64>,
    /// Strictly ordered in the expected direction.
    pub ordered: bool,
}

fn separation_row(tau: f64, b: f64, a: f64) -> SeparationRow {
    let ratio = if b > 0.0 {
        Some(a / b)
    } else if a > 0.0 {
        None
    } else {
        Some(1.0)
    };
    SeparationRow { tau, benign_tail: b, attack_tail: a, ratio, ordered: a > b }
}

/// Tabulates tail separation between a benign corpus and an attack corpus at
/// each threshold in `taus`.
pub fn separation_report_at(
    benign: &[f64],
    attack: &[f64],
    taus: &[f64],
) -> Result<Vec<SeparationRow>, LddError> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        rows.push(separation_row(tau, tail_statistic(benign, tau)?, tail_statistic(attack, tau)?));
    }
    Ok(rows)
}

/// Separation at the standing thresholds, computed from two histograms'
/// recorded tail probabilities.
pub fn separation_report(benign: &Histogram, attack: &Histogram) -> Vec<SeparationRow> {
    TAIL_THRESHOLDS
        .iter()
        .map(|&tau| {
            let key = threshold_key(tau);
            separation_row(tau, benign.tail_probs[&key], attack.tail_probs[&key])
        })
        .collect()
}
