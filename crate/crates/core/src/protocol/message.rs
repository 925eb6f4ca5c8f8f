//! Protocol messages and the verifiable-compute report they carry.

use crate::commit::Commitment;
use crate::metrics::DistanceSample;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// 128-bit request identifier, rendered as a hyphenated UUID on the wire.
pub type RequestId = Uuid;

/// Report of one trusted re-execution. The boolean trio records how far the
/// proof got; `aborted` implies every sample list is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcReport {
    /// Both the model and trace commitments matched the witness.
    pub commitments_ok: bool,
    /// Every committed decision re-derives from its committed logits.
    pub decisions_ok: bool,
    /// Claimed `(y, T)` equal reconstruction over the committed decisions.
    pub reconstruction_ok: bool,
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    /// Token-sampling distance stream; the binding stream for verdicts.
    pub distance_samples: Vec<DistanceSample>,
    /// Expert-routing distance stream; reported, never binding.
    pub expert_samples: Vec<DistanceSample>,
    /// Commitments the proof was checked against, echoed so the auditor can
    /// match them to the published model and the earlier response.
    pub model_commitment: Commitment,
    pub trace_commitment: Commitment,
}

impl VcReport {
    pub fn passed(&self) -> bool {
        !self.aborted && self.commitments_ok && self.decisions_ok && self.reconstruction_ok
    }
}

/// Distance evidence for one audited request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LddReport {
    pub request_id: RequestId,
    pub vc: VcReport,
}

/// Wire messages. `Error` is transport plumbing for the failure paths
/// (unknown request, purged entry, invalid prompt); the audit treats any
/// error reply to an `Audit` as refusal to prove.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Request {
        request_id: RequestId,
        prompt: Vec<u32>,
    },
    Response {
        request_id: RequestId,
        output_tokens: Vec<u32>,
        reported_token_count: u64,
        trace_commitment: Commitment,
    },
    Audit {
        request_id: RequestId,
    },
    Proof {
        request_id: RequestId,
        ldd_report: LddReport,
        vc_ok: bool,
    },
    Error {
        request_id: RequestId,
        code: String,
        detail: String,
    },
}

impl Message {
    pub fn request_id(&self) -> RequestId {
        match self {
            Message::Request { request_id, .. }
            | Message::Response { request_id, .. }
            | Message::Audit { request_id }
            | Message::Proof { request_id, .. }
            | Message::Error { request_id, .. } => *request_id,
        }
    }
}

/// Error codes carried by [`Message::Error`].
pub mod error_code {
    pub const AUDIT_UNAVAILABLE: &str = "audit_unavailable";
    pub const INVALID_PROMPT: &str = "invalid_prompt";
    pub const DUPLICATE_ID: &str = "duplicate_id";
    pub const MALFORMED: &str = "malformed";
    pub const INTERNAL: &str = "internal";
}
