//! Hash commitments over model parameters and execution traces.
//!
//! Commitments bind the server to a claimed model before any audit and to
//! the full trace of each request at response time. Both commit to a
//! canonical length-prefixed binary encoding (see `docs/formats.md`) hashed
//! with SHA-256; the encoding starts with a four-byte magic and a version
//! byte so model and trace bytes can never collide.

use crate::model::{DecisionKind, DecisionValue, ModelSpec, StepRecord, StepTrace};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Identifier of the only commitment scheme this version produces.
pub const SCHEME_ID: &str = "sha256-v1";

const MODEL_MAGIC: &[u8; 4] = b"LDDM";
const TRACE_MAGIC: &[u8; 4] = b"LDDT";
const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CommitError {
    #[error("unsupported commitment scheme {0:?}")]
    UnsupportedScheme(String),
}

mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        bytes.try_into().map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// A binding commitment: digest plus the scheme that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commitment {
    #[serde(with = "hex_digest")]
    pub digest: [u8; 32],
    pub scheme_id: String,
}

impl Commitment {
    fn of(bytes: &[u8]) -> Commitment {
        let digest = Sha256::digest(bytes).into();
        Commitment { digest, scheme_id: SCHEME_ID.to_string() }
    }
}

/// Opening of a trace commitment: per-request seed and the full trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOpening {
    #[serde(with = "hex_digest")]
    pub seed_r: [u8; 32],
    pub trace: Vec<StepTrace>,
}

/// Either opening, for the generic [`verify`] entry point.
pub enum OpeningRef<'a> {
    Model(&'a ModelSpec),
    Trace(&'a [u8; 32], &'a [StepTrace]),
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64_slice(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_u32_slice(out: &mut Vec<u8>, v: &[u32]) {
    put_u64(out, v.len() as u64);
    for x in v {
        put_u64(out, *x as u64);
    }
}

/// Canonical model bytes: magic, version, then every spec field as u64 LE in
/// declaration order. Optional fields encode presence explicitly.
pub fn canonical_model_bytes(spec: &ModelSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(80);
    out.extend_from_slice(MODEL_MAGIC);
    out.push(VERSION);
    put_u64(&mut out, spec.seed);
    put_u64(&mut out, spec.hidden_dim as u64);
    put_u64(&mut out, spec.vocab_size as u64);
    put_u64(&mut out, spec.num_experts as u64);
    put_u64(&mut out, spec.top_k_tokens as u64);
    match spec.top_k_experts {
        None => out.push(0),
        Some(k) => {
            out.push(1);
            put_u64(&mut out, k as u64);
        }
    }
    put_u64(&mut out, spec.max_steps as u64);
    out
}

/// Canonical trace bytes: magic, version, seed, then each step with tagged
/// record and decision payloads, every integer as u64 LE and every logit as
/// f64 LE bits.
pub fn canonical_trace_bytes(seed_r: &[u8; 32], trace: &[StepTrace]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + trace.len() * 64);
    out.extend_from_slice(TRACE_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(seed_r);
    put_u64(&mut out, trace.len() as u64);
    for step in trace {
        put_u64(&mut out, step.step_index as u64);
        out.push(match step.decision_kind {
            DecisionKind::TokenSample => 0,
            DecisionKind::ExpertRoute => 1,
        });
        match &step.record {
            StepRecord::Full { logits } => {
                out.push(0);
                put_f64_slice(&mut out, logits);
            }
            StepRecord::Compact { top_k_indices } => {
                out.push(1);
                put_u32_slice(&mut out, top_k_indices);
            }
        }
        match &step.decision {
            DecisionValue::Token(t) => {
                out.push(0);
                put_u64(&mut out, *t as u64);
            }
            DecisionValue::Experts(set) => {
                out.push(1);
                put_u32_slice(&mut out, set);
            }
        }
        put_u64(&mut out, step.rand_tag);
    }
    out
}

/// Commits to a model spec.
pub fn commit_model(spec: &ModelSpec) -> Commitment {
    Commitment::of(&canonical_model_bytes(spec))
}

/// Commits to a trace under its per-request seed.
pub fn commit_trace(seed_r: &[u8; 32], trace: &[StepTrace]) -> Commitment {
    Commitment::of(&canonical_trace_bytes(seed_r, trace))
}

fn check_scheme(c: &Commitment) -> Result<(), CommitError> {
    if c.scheme_id != SCHEME_ID {
        return Err(CommitError::UnsupportedScheme(c.scheme_id.clone()));
    }
    Ok(())
}

/// Checks a model commitment against an offered spec.
pub fn verify_model(c: &Commitment, spec: &ModelSpec) -> Result<bool, CommitError> {
    check_scheme(c)?;
    Ok(commit_model(spec).digest == c.digest)
}

/// Checks a trace commitment against an offered opening.
pub fn verify_trace(
    c: &Commitment,
    seed_r: &[u8; 32],
    trace: &[StepTrace],
) -> Result<bool, CommitError> {
    check_scheme(c)?;
    Ok(commit_trace(seed_r, trace).digest == c.digest)
}

/// Generic verification over either opening kind.
pub fn verify(c: &Commitment, opening: OpeningRef<'_>) -> Result<bool, CommitError> {
    match opening {
        OpeningRef::Model(spec) => verify_model(c, spec),
        OpeningRef::Trace(seed_r, trace) => verify_trace(c, seed_r, trace),
    }
}
