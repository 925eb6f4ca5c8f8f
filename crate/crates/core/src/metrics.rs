//! Per-step logit distances between a deployed run and its aligned
//! full-precision reference.
//!
//! Three distances are supported:
//! * `TV` — total variation between the softmax distributions.
//! * `KL` — KL divergence of the deployed softmax from the reference softmax.
//! * `TopK` — minimal total logit movement that changes the runtime top-K
//!   index set into the reference top-K set.
//!
//! `TV` and `KL` need full logit records; `TopK` works from compact top-K
//! index records and is the only distance available in that mode.

use crate::model::{top_k_indices, ModelError, StepRecord, StepTrace};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("k={k} invalid for length {len}")]
    InvalidK { k: usize, len: usize },
    #[error("distance {0:?} unavailable for this record mode")]
    ModeError(DistanceKind),
    #[error("oracle limited to n <= {max}, got {got}")]
    TooLarge { got: usize, max: usize },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    TV,
    KL,
    TopK,
}

/// One measured step of an LDD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub step_index: u32,
    pub kind: DistanceKind,
    pub value: f64,
    /// Set when the step had no aligned reference counterpart (overreported
    /// steps past the reference end).
    pub flagged: bool,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::LengthMismatch(0, 0));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Total variation `0.5 * sum |softmax(a) - softmax(b)|`, in `[0, 1]`.
pub fn tv_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let (p, q) = (softmax(a), softmax(b));
    let sum: f64 = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum();
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

/// `KL(softmax(a) || softmax(b))`; zero-probability deployed entries
/// contribute zero. Softmax outputs are strictly positive, so the divergence
/// is finite; it is clamped below at zero against rounding.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let (p, q) = (softmax(a), softmax(b));
    let mut kl = 0.0;
    for (x, y) in p.iter().zip(&q) {
        if *x > 0.0 {
            kl += x * (x / y).ln();
        }
    }
    Ok(kl.max(0.0))
}

fn check_set(set: &[u32], k: usize, len: usize) -> Result<(), MetricError> {
    if k == 0 || k > len || set.len() != k {
        return Err(MetricError::InvalidK { k, len });
    }
    if !set.windows(2).all(|w| w[0] < w[1]) || set.iter().any(|&i| i as usize >= len) {
        return Err(MetricError::InvalidK { k, len });
    }
    Ok(())
}

/// Cost of forcing `target_set` to be a top-K set of `deployed` at threshold
/// `t`: in-set logits must rise to at least `t`, out-of-set logits must fall
/// to at most `t`.
fn boundary_cost(deployed: &[f64], in_set: &[bool], t: f64) -> f64 {
    let mut cost = 0.0;
    for (l, &inside) in deployed.iter().zip(in_set) {
        if inside {
            cost += (t - l).max(0.0);
        } else {
            cost += (l - t).max(0.0);
        }
    }
    cost
}

/// Exact top-K set distance: the minimum over thresholds `t` of the total
/// movement needed so every logit of `target_set` clears `t` and every other
/// logit does not. The cost is piecewise affine in `t` with breakpoints at
/// the logit values, so scanning the logit values themselves is exact.
pub fn topk_distance(deployed: &[f64], target_set: &[u32], k: usize) -> Result<f64, MetricError> {
    if deployed.iter().any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    check_set(target_set, k, deployed.len())?;
    let mut in_set = vec![false; deployed.len()];
    for &i in target_set {
        in_set[i as usize] = true;
    }
    let mut best = f64::INFINITY;
    for &t in deployed {
        let c = boundary_cost(deployed, &in_set, t);
        if c < best {
            best = c;
        }
    }
    Ok(best)
}

/// Maximum problem size the brute-force oracle accepts.
pub const ORACLE_MAX_N: usize = 20;

/// Brute-force witness for [`topk_distance`], restricted to small inputs: a
/// dense threshold grid over the logit range, unioned with the exact
/// breakpoint candidates.
pub fn topk_distance_oracle(
    deployed: &[f64],
    target_set: &[u32],
    k: usize,
) -> Result<f64, MetricError> {
    if deployed.len() > ORACLE_MAX_N {
        return Err(MetricError::TooLarge { got: deployed.len(), max: ORACLE_MAX_N });
    }
    if deployed.iter().any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    check_set(target_set, k, deployed.len())?;
    let mut in_set = vec![false; deployed.len()];
    for &i in target_set {
        in_set[i as usize] = true;
    }
    let lo = deployed.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = deployed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let step = ((hi - lo) / 2000.0).max(1e-4);
    let mut best = f64::INFINITY;
    let mut t = lo;
    while t <= hi {
        best = best.min(boundary_cost(deployed, &in_set, t));
        t += step;
    }
    for &t in deployed {
        best = best.min(boundary_cost(deployed, &in_set, t));
    }
    Ok(best)
}

/// Distance of one deployed step against its aligned reference logits.
pub fn step_distance(
    step: &StepTrace,
    reference: &[f64],
    kind: DistanceKind,
    top_k: usize,
) -> Result<f64, MetricError> {
    match (&step.record, kind) {
        (StepRecord::Full { logits }, DistanceKind::TV) => tv_distance(logits, reference),
        (StepRecord::Full { logits }, DistanceKind::KL) => kl_divergence(logits, reference),
        (StepRecord::Full { logits }, DistanceKind::TopK) => {
            let target = top_k_indices(reference, top_k)?;
            topk_distance(logits, &target, top_k)
        }
        (StepRecord::Compact { top_k_indices: runtime }, DistanceKind::TopK) => {
            // Compact records hold the runtime set; movement is measured on
            // the reference logits toward that set.
            check_set(runtime, top_k, reference.len())?;
            topk_distance(reference, runtime, top_k)
        }
        (StepRecord::Compact { .. }, other) => Err(MetricError::ModeError(other)),
    }
}

/// Distance value assigned to a step with no reference counterpart.
pub fn sentinel_distance(kind: DistanceKind, record: &StepRecord, top_k: usize) -> f64 {
    match (kind, record) {
        // No reference exists; score against the uninformative uniform
        // reference (all-zero logits). For a dummy point mass that TV is
        // maximal and the KL is the full log-vocab.
        (DistanceKind::TV, StepRecord::Full { logits }) => {
            tv_distance(logits, &vec![0.0; logits.len()]).unwrap_or(1.0)
        }
        (DistanceKind::KL, StepRecord::Full { logits }) => {
            kl_divergence(logits, &vec![0.0; logits.len()]).unwrap_or(f64::MAX)
        }
        (DistanceKind::TopK, StepRecord::Full { logits }) => {
            let n = logits.len();
            let k = top_k.min(n);
            match top_k_indices(logits, k) {
                Ok(target) => topk_distance(&vec![0.0; n], &target, k).unwrap_or(0.0),
                Err(_) => 0.0,
            }
        }
        (DistanceKind::TV, StepRecord::Compact { .. }) => 1.0,
        (DistanceKind::KL, StepRecord::Compact { .. }) => f64::MAX,
        (DistanceKind::TopK, StepRecord::Compact { top_k_indices }) => {
            let n = top_k_indices.iter().map(|&i| i as usize + 1).max().unwrap_or(1);
            topk_distance(&vec![0.0; n.max(top_k)], top_k_indices, top_k_indices.len())
                .unwrap_or(0.0)
        }
    }
}

/// Measures every step of `trace` against `reference` (aligned, one logit
/// vector per step). Steps beyond the reference length are flagged and get
/// the sentinel distance.
pub fn measure_trace(
    trace: &[StepTrace],
    reference: &[Vec<f64>],
    kind: DistanceKind,
    top_k: usize,
) -> Result<Vec<DistanceSample>, MetricError> {
    let mut out = Vec::with_capacity(trace.len());
    for (i, step) in trace.iter().enumerate() {
        let (value, flagged) = match reference.get(i) {
            Some(r) => (step_distance(step, r, kind, top_k)?, false),
            None => (sentinel_distance(kind, &step.record, top_k), true),
        };
        out.push(DistanceSample { step_index: step.step_index, kind, value, flagged });
    }
    Ok(out)
}
