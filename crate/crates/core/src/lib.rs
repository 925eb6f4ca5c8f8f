//! Auditing framework for hybrid-computation language model inference.
//!
//! Inference is modeled as a recurrence that alternates continuous
//! transformations with discrete decisions: an embedding `E` maps the prompt
//! to a hidden state, a continuous step `F` produces logits, a selection rule
//! `S` makes a discrete decision from those logits, an update `G` folds the
//! decision back into the state, and a reconstruction `D` turns the decision
//! sequence into the visible output `(y, T)`.
//!
//! A server commits to its per-request logit trace at response time. An
//! auditor later asks for a proof; a trusted re-execution (the verifiable
//! computation role) checks the commitments, re-derives every discrete
//! decision from the committed logits, re-runs the full-precision reference
//! along the same control path, checks output consistency, and emits the
//! per-step distances between deployed and reference logits. The distribution
//! of those distances (the logit distance distribution, LDD) separates benign
//! numerical noise from quantization, model substitution, token
//! overreporting, and fabricated transcripts.
//!
//! Crate layout:
//!
//! * [`prf`] — seeded, labeled randomness streams; everything is replayable.
//! * [`model`] — the synthetic hybrid model with injectable deviations.
//! * [`commit`] — hash commitments over canonical byte serializations.
//! * [`metrics`] — TV, KL, and the top-K minimal-perturbation distance.
//! * [`ldd`] — distance aggregation, histograms, and the per-request
//!   `p(t1) > t2` decision rule.
//! * [`calibrate`] — the threshold ceremony and EVT tail estimation.
//! * [`audit_math`] — randomized-audit sample sizes and binomial bounds.
//! * [`protocol`] — server, auditor, verifier state machines, log store,
//!   and the wire format.
//! * [`cli`] — the `ldd-audit` command line driver.

pub mod audit_math;
pub mod calibrate;
pub mod cli;
pub mod commit;
pub mod ldd;
pub mod metrics;
pub mod model;
pub mod prf;
pub mod protocol;
