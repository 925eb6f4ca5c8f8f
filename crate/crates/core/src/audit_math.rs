//! Randomized-auditing arithmetic: sample sizes and campaign-level
//! completeness/soundness bounds.
//!
//! With a fraction `alpha` of requests dishonest and each audited dishonest
//! request flagged with probability `p`, one uniformly random audit catches
//! a deviation with probability `alpha * p`. Driving the miss probability
//! below `eta` needs `ceil(ln eta / ln(1 - alpha * p))` audits. A campaign
//! rejects a server when more than `k` of `n` audits flag; the binomial
//! tails below size `k` against a benign false-positive rate and report the
//! detection power that threshold keeps.
//!
//! All tail sums run in log space with compensated accumulation so that
//! probabilities near 1e-8 keep full relative precision.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AuditMathError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("no rejection threshold satisfies the completeness target")]
    Infeasible,
}

/// A fully specified audit campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignPlan {
    /// Dishonesty fraction the plan defends against.
    pub alpha: f64,
    /// Per-request flag probability on an audited dishonest request.
    pub per_request_detect: f64,
    /// Target probability that a dishonest server escapes the campaign.
    pub evasion_eta: f64,
    pub n_audits: u64,
    /// Maximum tolerated flags; more than this rejects the server.
    pub reject_threshold_k: u64,
}

/// Plan plus the probabilities it realizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan: CampaignPlan,
    /// Probability an honest server is rejected.
    pub false_reject: f64,
    /// Probability a dishonest server is rejected.
    pub realized_soundness: f64,
}

fn check_unit_open_closed(v: f64, name: &'static str) -> Result<(), AuditMathError> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(AuditMathError::InvalidArgument(name));
    }
    Ok(())
}

/// Audits needed so a server deviating on an `alpha` fraction of requests,
/// each flagged with probability `p_detect` when audited, evades all of them
/// with probability at most `eta`.
pub fn required_samples(alpha: f64, p_detect: f64, eta: f64) -> Result<u64, AuditMathError> {
    check_unit_open_closed(alpha, "alpha must lie in (0, 1]")?;
    check_unit_open_closed(p_detect, "p_detect must lie in (0, 1]")?;
    if !(eta > 0.0 && eta < 1.0) {
        return Err(AuditMathError::InvalidArgument("eta must lie in (0, 1)"));
    }
    let q = alpha * p_detect;
    if q >= 1.0 {
        return Ok(1);
    }
    // ln(1 - q) via ln_1p for precision at small q.
    let denom = (-q).ln_1p();
    let n = (eta.ln() / denom).ceil();
    Ok(n as u64)
}

/// `P[Binomial(n, p) > k]` in log space. Returns 0 for `k >= n` and treats
/// `p` outside `[0, 1]` as clamped.
pub fn binomial_upper_tail(n: u64, p: f64, k: u64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if n == 0 || k >= n {
        return 0.0;
    }
    if p == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return 1.0;
    }
    let nf = n as f64;
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let ln_term = |i: u64| {
        let fi = i as f64;
        ln_gamma(nf + 1.0) - ln_gamma(fi + 1.0) - ln_gamma(nf - fi + 1.0)
            + fi * ln_p
            + (nf - fi) * ln_q
    };
    let start = k + 1;
    let mode = ((nf + 1.0) * p).floor() as u64;
    let peak = ln_term(start.max(mode.min(n)));
    // Kahan-compensated sum of exp(ln_term - peak).
    let mut sum = 0.0;
    let mut comp = 0.0;
    for i in start..=n {
        let t = (ln_term(i) - peak).exp();
        let y = t - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
        if i > mode && t < 1e-25 {
            break;
        }
    }
    (peak + sum.ln()).exp().clamp(0.0, 1.0)
}

/// Probability an honest server trips the campaign: more than `k` of `n`
/// audits flag at benign false-positive rate `fp`.
pub fn false_reject_prob(n: u64, fp: f64, k: u64) -> f64 {
    binomial_upper_tail(n, fp, k)
}

/// Probability a dishonest server is caught: more than `k` of `n` audits
/// flag at per-audit detection probability `p`.
pub fn detect_prob(n: u64, p: f64, k: u64) -> f64 {
    binomial_upper_tail(n, p, k)
}

/// `P[Poisson(lambda) > k]`, the small-`p` limit used to cross-check the
/// binomial tails.
pub fn poisson_upper_tail(lambda: f64, k: u64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let start = k + 1;
    let mut ln_term = -lambda + start as f64 * lambda.ln() - ln_gamma(start as f64 + 1.0);
    let mut term = ln_term.exp();
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut i = start;
    loop {
        let y = term - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
        i += 1;
        ln_term += lambda.ln() - (i as f64).ln();
        term = ln_term.exp();
        if i as f64 > lambda && (term < 1e-30 || term < sum * 1e-18) {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Monte-Carlo estimate of `P[Binomial(n, p) > k]`.
pub fn mc_binomial_tail(
    n: u64,
    p: f64,
    k: u64,
    trials: u64,
    rng: &mut impl Rng,
) -> Result<f64, AuditMathError> {
    if trials == 0 {
        return Err(AuditMathError::InvalidArgument("trials must be positive"));
    }
    let dist = Binomial::new(n, p)
        .map_err(|_| AuditMathError::InvalidArgument("p must lie in [0, 1]"))?;
    let mut hits = 0u64;
    for _ in 0..trials {
        if dist.sample(rng) > k {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

/// Builds a campaign: `n` from the evasion target, then the smallest reject
/// threshold `k` whose false-reject probability meets `completeness_target`.
pub fn plan_campaign(
    alpha: f64,
    p_detect: f64,
    eta: f64,
    fp: f64,
    completeness_target: f64,
) -> Result<PlanOutcome, AuditMathError> {
    if !(0.0..=1.0).contains(&fp) {
        return Err(AuditMathError::InvalidArgument("fp must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&completeness_target) {
        return Err(AuditMathError::InvalidArgument(
            "completeness_target must lie in [0, 1]",
        ));
    }
    let n = required_samples(alpha, p_detect, eta)?;
    let mut chosen = None;
    for k in 0..n {
        if false_reject_prob(n, fp, k) <= completeness_target {
            chosen = Some(k);
            break;
        }
    }
    let k = chosen.ok_or(AuditMathError::Infeasible)?;
    Ok(PlanOutcome {
        false_reject: false_reject_prob(n, fp, k),
        realized_soundness: detect_prob(n, alpha * p_detect, k),
        plan: CampaignPlan {
            alpha,
            per_request_detect: p_detect,
            evasion_eta: eta,
            n_audits: n,
            reject_threshold_k: k,
        },
    })
}
