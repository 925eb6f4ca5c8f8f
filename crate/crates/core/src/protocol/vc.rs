//! Trusted re-execution standing in for the attested verifiable-compute
//! role.
//!
//! [`vc_execute`] receives public inputs (both commitments, the prompt, the
//! claimed output and token count) plus the server's witness (claimed
//! full-precision spec and the trace opening) and discharges the proof
//! obligations in order:
//!
//! 1. both commitments verify against the witness, else abort `commitment`;
//! 2. every committed decision re-derives from its committed record (full
//!    logits re-select the same value with the committed randomness; compact
//!    records must contain the decision and be well-formed), else abort
//!    `decision`;
//! 3. the full-precision reference re-executes under the committed decision
//!    sequence (control-flow alignment), malformed sequences abort
//!    `decision`;
//! 4. reconstruction over the committed decisions must equal the claimed
//!    `(y, T)`, else abort `output`;
//! 5. per-step distances between committed and reference logits are emitted;
//!    steps past the first stop decision have no reference and get sentinel
//!    values with the `flagged` bit set.
//!
//! Abort reason `mode` covers a witness whose records cannot support the
//! configured distance (compact records under TV or KL).

use super::message::VcReport;
use crate::commit::{verify_model, verify_trace, Commitment, TraceOpening};
use crate::metrics::{self, DistanceKind, DistanceSample, MetricError};
use crate::model::{DecisionKind, DecisionValue, Model, ModelSpec, StepRecord, StepTrace};
use crate::prf;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Everything the prover hands the trusted side.
pub struct VcWitness<'a> {
    pub spec: &'a ModelSpec,
    pub opening: &'a TraceOpening,
}

/// Public inputs of one proof.
pub struct VcInputs<'a> {
    pub model_commitment: &'a Commitment,
    pub trace_commitment: &'a Commitment,
    pub prompt: &'a [u32],
    pub output_tokens: &'a [u32],
    pub reported_token_count: u64,
    pub distance_kind: DistanceKind,
}

thread_local! {
    static MODEL_CACHE: RefCell<HashMap<[u8; 32], Rc<Model>>> = RefCell::new(HashMap::new());
}

fn cached_reference(spec: &ModelSpec, digest: [u8; 32]) -> Option<Rc<Model>> {
    MODEL_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        if let Some(m) = cache.get(&digest) {
            return Some(Rc::clone(m));
        }
        let model = Rc::new(Model::new(spec).ok()?);
        if cache.len() > 8 {
            cache.clear();
        }
        cache.insert(digest, Rc::clone(&model));
        Some(model)
    })
}

fn abort(
    reason: &str,
    commitments_ok: bool,
    decisions_ok: bool,
    inputs: &VcInputs<'_>,
) -> VcReport {
    VcReport {
        commitments_ok,
        decisions_ok,
        reconstruction_ok: false,
        aborted: true,
        abort_reason: Some(reason.to_string()),
        distance_samples: Vec::new(),
        expert_samples: Vec::new(),
        model_commitment: inputs.model_commitment.clone(),
        trace_commitment: inputs.trace_commitment.clone(),
    }
}

fn well_formed_set(set: &[u32], len: usize, k: usize) -> bool {
    set.len() == k && set.windows(2).all(|w| w[0] < w[1]) && set.iter().all(|&i| (i as usize) < len)
}

/// Checks obligation 2 for one step.
fn decision_rederives(spec: &ModelSpec, seed_r: &[u8; 32], step: &StepTrace) -> bool {
    let expected_tag = prf::step_rand_tag(seed_r, step.step_index);
    if step.rand_tag != expected_tag {
        return false;
    }
    match (step.decision_kind, &step.record, &step.decision) {
        (DecisionKind::TokenSample, StepRecord::Full { logits }, DecisionValue::Token(t)) => {
            logits.len() == spec.vocab_size
                && crate::model::select(logits, step.rand_tag, spec.top_k_tokens) == Ok(*t)
        }
        (
            DecisionKind::TokenSample,
            StepRecord::Compact { top_k_indices },
            DecisionValue::Token(t),
        ) => {
            well_formed_set(top_k_indices, spec.vocab_size, spec.top_k_tokens)
                && top_k_indices.contains(t)
        }
        (DecisionKind::ExpertRoute, StepRecord::Full { logits }, DecisionValue::Experts(set)) => {
            let Some(k) = spec.top_k_experts else { return false };
            logits.len() == spec.num_experts
                && crate::model::top_k_indices(logits, k).as_deref() == Ok(set.as_slice())
        }
        (
            DecisionKind::ExpertRoute,
            StepRecord::Compact { top_k_indices },
            DecisionValue::Experts(set),
        ) => {
            let Some(k) = spec.top_k_experts else { return false };
            well_formed_set(top_k_indices, spec.num_experts, k) && top_k_indices == set
        }
        _ => false,
    }
}

/// Index one past the first stop-token decision, or the trace length. The
/// reference never executes past the step cap, so runs that hit the cap
/// before stopping treat everything beyond it as overhang.
fn terminal_prefix_len(trace: &[StepTrace], stop: u32, max_steps: usize) -> usize {
    for (i, step) in trace.iter().enumerate() {
        if step.decision_kind == DecisionKind::TokenSample
            && step.decision == DecisionValue::Token(stop)
        {
            return (i + 1).min(max_steps);
        }
    }
    trace.len().min(max_steps)
}

/// Runs the full proof; total, never errors.
pub fn vc_execute(inputs: &VcInputs<'_>, witness: &VcWitness<'_>) -> VcReport {
    let spec = witness.spec;
    let opening = witness.opening;
    let trace = &opening.trace;

    // Obligation 1: commitments.
    let model_ok = spec.validate().is_ok()
        && verify_model(inputs.model_commitment, spec).unwrap_or(false);
    let trace_ok =
        verify_trace(inputs.trace_commitment, &opening.seed_r, trace).unwrap_or(false);
    if !model_ok || !trace_ok {
        return abort("commitment", false, false, inputs);
    }

    // Obligation 2: committed decisions re-derive from committed records.
    for (i, step) in trace.iter().enumerate() {
        if step.step_index as usize != i || !decision_rederives(spec, &opening.seed_r, step) {
            return abort("decision", true, false, inputs);
        }
    }

    // Obligation 3: control-flow-aligned reference execution over the prefix
    // up to the terminal decision.
    let digest = inputs.model_commitment.digest;
    let Some(reference) = cached_reference(spec, digest) else {
        return abort("decision", true, true, inputs);
    };
    let stop = spec.stop_token();
    let prefix_len = terminal_prefix_len(trace, stop, spec.max_steps);
    let decisions: Vec<(DecisionKind, DecisionValue)> = trace[..prefix_len]
        .iter()
        .map(|s| (s.decision_kind, s.decision.clone()))
        .collect();
    let reference_logits = match reference.reexecute_aligned(inputs.prompt, &decisions) {
        Ok(l) => l,
        Err(_) => return abort("decision", true, true, inputs),
    };

    // Obligation 4: claimed output and token count reconstruct.
    let (y, t) = crate::model::reconstruct(
        trace.iter().map(|s| (s.decision_kind, &s.decision)),
        stop,
    );
    if y != inputs.output_tokens || t != inputs.reported_token_count {
        return abort("output", true, true, inputs);
    }

    // Obligation 5: per-step distances, split into the binding token stream
    // and the reported expert stream.
    let mut distance_samples = Vec::new();
    let mut expert_samples = Vec::new();
    for (i, step) in trace.iter().enumerate() {
        let (kind, top_k, out) = match step.decision_kind {
            DecisionKind::TokenSample => {
                (inputs.distance_kind, spec.top_k_tokens, &mut distance_samples)
            }
            DecisionKind::ExpertRoute => {
                (DistanceKind::TopK, spec.top_k_experts.unwrap_or(1), &mut expert_samples)
            }
        };
        let sample = if i < prefix_len {
            match metrics::step_distance(step, &reference_logits[i], kind, top_k) {
                Ok(value) => DistanceSample { step_index: step.step_index, kind, value, flagged: false },
                Err(MetricError::ModeError(k)) => {
                    return abort("mode", true, true, inputs).with_mode_note(k)
                }
                Err(_) => return abort("decision", true, true, inputs),
            }
        } else {
            DistanceSample {
                step_index: step.step_index,
                kind,
                value: metrics::sentinel_distance(kind, &step.record, top_k),
                flagged: true,
            }
        };
        out.push(sample);
    }

    VcReport {
        commitments_ok: true,
        decisions_ok: true,
        reconstruction_ok: true,
        aborted: false,
        abort_reason: None,
        distance_samples,
        expert_samples,
        model_commitment: inputs.model_commitment.clone(),
        trace_commitment: inputs.trace_commitment.clone(),
    }
}

trait ModeNote {
    fn with_mode_note(self, kind: DistanceKind) -> Self;
}

impl ModeNote for VcReport {
    fn with_mode_note(mut self, kind: DistanceKind) -> Self {
        self.abort_reason = Some(format!("mode: {kind:?} needs full logit records"));
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commit::{commit_model, commit_trace};
    use crate::model::{DeviationConfig, ExecutionResult, LoggingMode};

    fn spec() -> ModelSpec {
        ModelSpec {
            seed: 5,
            hidden_dim: 12,
            vocab_size: 24,
            num_experts: 0,
            top_k_tokens: 6,
            top_k_experts: None,
            max_steps: 10,
        }
    }

    fn moe_spec() -> ModelSpec {
        ModelSpec {
            seed: 6,
            hidden_dim: 12,
            vocab_size: 24,
            num_experts: 5,
            top_k_experts: Some(2),
            top_k_tokens: 6,
            max_steps: 12,
        }
    }

    fn run(spec: &ModelSpec, dev: &DeviationConfig, mode: LoggingMode, seed: u8) -> ExecutionResult {
        let model = Model::deployed(spec, dev).unwrap();
        model.run(dev, &[1, 2, 3], &[seed; 32], mode).unwrap()
    }

    fn prove(
        spec: &ModelSpec,
        result: &ExecutionResult,
        kind: DistanceKind,
    ) -> VcReport {
        let opening = TraceOpening { seed_r: result.seed_r, trace: result.trace.clone() };
        let mc = commit_model(spec);
        let tc = commit_trace(&result.seed_r, &result.trace);
        vc_execute(
            &VcInputs {
                model_commitment: &mc,
                trace_commitment: &tc,
                prompt: &[1, 2, 3],
                output_tokens: &result.output_tokens,
                reported_token_count: result.reported_token_count,
                distance_kind: kind,
            },
            &VcWitness { spec, opening: &opening },
        )
    }

    #[test]
    fn honest_reference_run_passes_with_zero_distances() {
        let spec = spec();
        let result = run(&spec, &DeviationConfig::reference(), LoggingMode::Full, 1);
        let report = prove(&spec, &result, DistanceKind::TV);
        assert!(report.passed(), "{:?}", report.abort_reason);
        assert_eq!(report.distance_samples.len(), result.trace.len());
        for s in &report.distance_samples {
            assert_eq!(s.value, 0.0);
            assert!(!s.flagged);
        }
    }

    #[test]
    fn honest_compact_run_passes_under_topk() {
        let spec = spec();
        let result = run(&spec, &DeviationConfig::reference(), LoggingMode::CompactTopK, 2);
        let report = prove(&spec, &result, DistanceKind::TopK);
        assert!(report.passed());
        assert!(report.distance_samples.iter().all(|s| s.value == 0.0));
    }

    #[test]
    fn compact_run_under_tv_aborts_mode() {
        let spec = spec();
        let result = run(&spec, &DeviationConfig::reference(), LoggingMode::CompactTopK, 2);
        let report = prove(&spec, &result, DistanceKind::TV);
        assert!(report.aborted);
        assert!(report.abort_reason.unwrap().starts_with("mode"));
    }

    #[test]
    fn tampered_logits_abort_commitment() {
        let spec = spec();
        let mut result = run(&spec, &DeviationConfig::reference(), LoggingMode::Full, 3);
        let mc = commit_model(&spec);
        let tc = commit_trace(&result.seed_r, &result.trace);
        if let StepRecord::Full { logits } = &mut result.trace[0].record {
            logits[0] += 1e-12;
        }
        let opening = TraceOpening { seed_r: result.seed_r, trace: result.trace.clone() };
        let report = vc_execute(
            &VcInputs {
                model_commitment: &mc,
                trace_commitment: &tc,
                prompt: &[1, 2, 3],
                output_tokens: &result.output_tokens,
                reported_token_count: result.reported_token_count,
                distance_kind: DistanceKind::TV,
            },
            &VcWitness { spec: &spec, opening: &opening },
        );
        assert!(report.aborted);
        assert_eq!(report.abort_reason.as_deref(), Some("commitment"));
        assert!(!report.commitments_ok);
        assert!(report.distance_samples.is_empty());
    }

    #[test]
    fn wrong_witness_spec_aborts_commitment() {
        let spec = spec();
        let result = run(&spec, &DeviationConfig::reference(), LoggingMode::Full, 4);
        let mut other = spec.clone();
        other.seed += 1;
        let opening = TraceOpening { seed_r: result.seed_r, trace: result.trace.clone() };
        let report = vc_execute(
            &VcInputs {
                model_commitment: &commit_model(&spec),
                trace_commitment: &commit_trace(&result.seed_r, &result.trace),
                prompt: &[1, 2, 3],
                output_tokens: &result.output_tokens,
                reported_token_count: result.reported_token_count,
                distance_kind: DistanceKind::TV,
            },
            &VcWitness { spec: &other, opening: &opening },
        );
        assert_eq!(report.abort_reason.as_deref(), Some("commitment"));
    }

    #[test]
    fn forged_decision_aborts_decision() {
        let spec = spec();
        let mut result = run(&spec, &DeviationConfig::reference(), LoggingMode::Full, 5);
        // Replace a decision with a token the committed logits cannot
        // re-select, then re-commit so the commitment check passes.
        let step0 = &mut result.trace[0];
        let honest = step0.decision.clone();
        let forged = match &honest {
            DecisionValue::Token(t) => DecisionValue::Token((t + 1) % 24),
            _ => unreachable!(),
        };
        step0.decision = forged;
        let tc = commit_trace(&result.seed_r, &result.trace);
        let opening = TraceOpening { seed_r: result.seed_r, trace: result.trace.clone() };
        let report = vc_execute(
            &VcInputs {
                model_commitment: &commit_model(&spec),
                trace_commitment: &tc,
                prompt: &[1, 2, 3],
                output_tokens: &result.output_tokens,
                reported_token_count: result.reported_token_count,
                distance_kind: DistanceKind::TV,
            },
            &VcWitness { spec: &spec, opening: &opening },
        );
        assert!(report.aborted);
        assert_eq!(report.abort_reason.as_deref(), Some("decision"));
        assert!(report.commitments_ok);
        assert!(!report.decisions_ok);
    }

    #[test]
    fn wrong_rand_tag_aborts_decision() {
        let spec = spec();
        let mut result = run(&spec, &DeviationConfig::reference(), LoggingMode::Full, 6);
        result.trace[0].rand_tag ^= 1;
        let tc = commit_trace(&result.seed_r, &result.trace);
        let opening = TraceOpening { seed_r: result.seed_r, trace: result.trace.clone() };
        let report = vc_execute(
            &VcInputs {
                model_commitment: &commit_model(&spec),
                trace_commitment: &tc,
                prompt: &[1, 2, 3],
                output_tokens: &result.output_tokens,
                reported_token_count: result.reported_token_count,
                distance_kind: DistanceKind::TV,
            },
            &VcWitness { spec: &spec, opening: &opening },
        );
        assert_eq!(report.abort_reason.as_deref(), Some("decision"));
    }

    #[test]
    fn inflated_count_with_honest_trace_aborts_output() {
        let spec = spec();
        let result = run(&spec, &DeviationConfig::reference(), LoggingMode::Full, 7);
        let opening = TraceOpening { seed_r: result.seed_r, trace: result.trace.clone() };
        let report = vc_execute(
            &VcInputs {
                model_commitment: &commit_model(&spec),
                trace_commitment: &commit_trace(&result.seed_r, &result.trace),
                prompt: &[1, 2, 3],
                output_tokens: &result.output_tokens,
                reported_token_count: result.reported_token_count + 4,
                distance_kind: DistanceKind::TV,
            },
            &VcWitness { spec: &spec, opening: &opening },
        );
        assert!(report.aborted);
        assert_eq!(report.abort_reason.as_deref(), Some("output"));
        assert!(report.commitments_ok);
        assert!(report.decisions_ok);
        assert!(!report.reconstruction_ok);
    }

    #[test]
    fn overreport_transformed_model_passes_with_flagged_dummies() {
        let spec = spec();
        let k = 3;
        let dev = DeviationConfig::overreport(k);
        let result = run(&spec, &dev, LoggingMode::Full, 8);
        let report = prove(&spec, &result, DistanceKind::TV);
        // Reconstruction passes: T counts the dummy steps by construction.
        assert!(report.passed(), "{:?}", report.abort_reason);
        let flagged: Vec<_> =
            report.distance_samples.iter().filter(|s| s.flagged).collect();
        assert_eq!(flagged.len(), k);
        for s in &flagged {
            // Dummy point mass vs uniform reference: TV = 1 - 1/vocab.
            assert!((s.value - (1.0 - 1.0 / 24.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_run_splits_streams() {
        let spec = moe_spec();
        let result = run(&spec, &DeviationConfig::reference(), LoggingMode::Full, 9);
        let report = prove(&spec, &result, DistanceKind::TV);
        assert!(report.passed());
        assert!(!report.expert_samples.is_empty());
        assert!(report.expert_samples.iter().all(|s| s.kind == DistanceKind::TopK));
        assert!(report.distance_samples.iter().all(|s| s.kind == DistanceKind::TV));
        let total = report.distance_samples.len() + report.expert_samples.len();
        assert_eq!(total, result.trace.len());
    }

    #[test]
    fn benign_noise_yields_small_nonzero_distances() {
        let spec = spec();
        let result = run(&spec, &DeviationConfig::benign(0.01), LoggingMode::Full, 10);
        let report = prove(&spec, &result, DistanceKind::TV);
        assert!(report.passed());
        let max = report
            .distance_samples
            .iter()
            .map(|s| s.value)
            .fold(0.0f64, f64::max);
        assert!(max > 0.0, "noise must move some distance");
        assert!(max < 0.1, "sigma 0.01 stays far under the flag region, got {max}");
    }
}
