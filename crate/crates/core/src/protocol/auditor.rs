//! Auditor side of the protocol: issues random probes, audits each one, and
//! scores the returned distance distribution against calibrated thresholds.
//!
//! Every probe ends in one of three outcomes. `Clean` and `Flagged` carry the
//! threshold verdict over the distance samples; `Bottom` records a protocol
//! failure (refused audit, commitment mismatch, aborted proof) and always
//! counts as a detection, since an honest server can always produce a valid
//! proof for a retained request.

use super::message::{LddReport, Message, RequestId, VcReport};
use super::wire::{Transport, WireError};
use crate::calibrate::AuditParams;
use crate::commit::Commitment;
use crate::ldd::{self, RequestVerdict};
use crate::prf;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditorConfig {
    /// Token range for generated prompts; must match the server's model.
    pub vocab_size: usize,
    /// Inclusive bounds on generated prompt length.
    pub prompt_len: (usize, usize),
    /// Ceremony output: thresholds the verdict is scored against.
    pub params: AuditParams,
    /// Pinned model commitment; a proof naming any other model is bottom.
    pub expected_model_commitment: Commitment,
}

/// Result of scoring one audited request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProbeOutcome {
    Clean(RequestVerdict),
    Flagged(RequestVerdict),
    /// Protocol-level failure, with a short machine-checkable reason.
    Bottom(String),
}

impl ProbeOutcome {
    /// Detection in the campaign sense: a flag or any protocol failure.
    pub fn detected(&self) -> bool {
        !matches!(self, ProbeOutcome::Clean(_))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub request_id: RequestId,
    pub outcome: ProbeOutcome,
    pub output_len: usize,
    pub reported_token_count: u64,
    /// Token-stream distances from the proof, in step order; empty when the
    /// probe never reached a proof.
    pub token_samples: Vec<f64>,
    /// Routing-stream distances; reported, non-binding.
    pub expert_samples: Vec<f64>,
    pub flagged_steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampaignReport {
    pub n_audits: u64,
    pub flags: u64,
    pub reject_threshold_k: u64,
    /// Campaign verdict: accept iff `flags <= reject_threshold_k`.
    pub accept: bool,
    pub params: AuditParams,
    pub records: Vec<ProbeRecord>,
}

/// Transport failed mid-probe; retryable, distinct from a bottom outcome.
#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("empty prompt length range")]
    BadPromptRange,
}

pub struct Auditor {
    config: AuditorConfig,
    rng: ChaCha8Rng,
}

impl Auditor {
    pub fn new(config: AuditorConfig, seed: u64) -> Self {
        Auditor { config, rng: prf::stream(seed, "auditor") }
    }

    fn fresh_id(&mut self) -> RequestId {
        let mut bytes = [0u8; 16];
        self.rng.fill(&mut bytes);
        Uuid::from_bytes(uuid::Builder::from_random_bytes(bytes).into_uuid().into_bytes())
    }

    fn fresh_prompt(&mut self) -> Result<Vec<u32>, ProbeError> {
        let (lo, hi) = self.config.prompt_len;
        if lo == 0 || hi < lo {
            return Err(ProbeError::BadPromptRange);
        }
        let len = self.rng.random_range(lo..=hi);
        Ok((0..len)
            .map(|_| self.rng.random_range(0..self.config.vocab_size as u32))
            .collect())
    }

    /// One full probe: request, response, audit, proof, verdict.
    pub fn probe(&mut self, transport: &mut dyn Transport) -> Result<ProbeRecord, ProbeError> {
        let request_id = self.fresh_id();
        let prompt = self.fresh_prompt()?;
        let reply = transport.round_trip(&Message::Request { request_id, prompt })?;
        let (output_len, reported_token_count, trace_commitment) = match reply {
            Message::Response {
                request_id: rid,
                output_tokens,
                reported_token_count,
                trace_commitment,
            } if rid == request_id => (output_tokens.len(), reported_token_count, trace_commitment),
            Message::Error { code, .. } => {
                return Ok(self.bottom(request_id, format!("unavailable:{code}")))
            }
            _ => return Ok(self.bottom(request_id, "unexpected_message".to_string())),
        };

        let reply = transport.round_trip(&Message::Audit { request_id })?;
        let report = match reply {
            Message::Proof { request_id: rid, ldd_report, .. } if rid == request_id => ldd_report,
            Message::Error { code, .. } => {
                return Ok(ProbeRecord {
                    request_id,
                    outcome: ProbeOutcome::Bottom(format!("unavailable:{code}")),
                    output_len,
                    reported_token_count,
                    token_samples: Vec::new(),
                    expert_samples: Vec::new(),
                    flagged_steps: 0,
                })
            }
            _ => {
                return Ok(ProbeRecord {
                    request_id,
                    outcome: ProbeOutcome::Bottom("unexpected_message".to_string()),
                    output_len,
                    reported_token_count,
                    token_samples: Vec::new(),
                    expert_samples: Vec::new(),
                    flagged_steps: 0,
                })
            }
        };
        let outcome = self.score(&report, &trace_commitment);
        let vc = &report.vc;
        Ok(ProbeRecord {
            request_id,
            outcome,
            output_len,
            reported_token_count,
            token_samples: vc.distance_samples.iter().map(|s| s.value).collect(),
            expert_samples: vc.expert_samples.iter().map(|s| s.value).collect(),
            flagged_steps: vc.distance_samples.iter().filter(|s| s.flagged).count() as u64,
        })
    }

    fn bottom(&self, request_id: RequestId, reason: String) -> ProbeRecord {
        ProbeRecord {
            request_id,
            outcome: ProbeOutcome::Bottom(reason),
            output_len: 0,
            reported_token_count: 0,
            token_samples: Vec::new(),
            expert_samples: Vec::new(),
            flagged_steps: 0,
        }
    }

    /// Scores a proof against the pinned commitments and thresholds.
    pub fn score(&self, report: &LddReport, trace_commitment: &Commitment) -> ProbeOutcome {
        let vc: &VcReport = &report.vc;
        if vc.aborted || !vc.passed() {
            let reason = vc.abort_reason.clone().unwrap_or_else(|| "unspecified".to_string());
            return ProbeOutcome::Bottom(format!("vc_aborted:{reason}"));
        }
        if vc.model_commitment != self.config.expected_model_commitment {
            return ProbeOutcome::Bottom("model_commitment_mismatch".to_string());
        }
        if &vc.trace_commitment != trace_commitment {
            return ProbeOutcome::Bottom("trace_commitment_mismatch".to_string());
        }
        let values: Vec<f64> = vc.distance_samples.iter().map(|s| s.value).collect();
        match ldd::decide(&values, self.config.params.t1, self.config.params.t2) {
            Ok(verdict) => {
                if verdict.flagged {
                    ProbeOutcome::Flagged(verdict)
                } else {
                    ProbeOutcome::Clean(verdict)
                }
            }
            Err(_) => ProbeOutcome::Bottom("empty_distance_set".to_string()),
        }
    }

    /// Runs `n` probes and applies the campaign-level accept rule.
    pub fn run_campaign(
        &mut self,
        transport: &mut dyn Transport,
        n_audits: u64,
        reject_threshold_k: u64,
    ) -> Result<CampaignReport, ProbeError> {
        let mut records = Vec::with_capacity(n_audits as usize);
        let mut flags = 0u64;
        for _ in 0..n_audits {
            let record = self.probe(transport)?;
            if record.outcome.detected() {
                flags += 1;
            }
            records.push(record);
        }
        Ok(CampaignReport {
            n_audits,
            flags,
            reject_threshold_k,
            accept: flags <= reject_threshold_k,
            params: self.config.params.clone(),
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DistanceKind;
    use crate::model::{DeviationConfig, LoggingMode, ModelSpec};
    use crate::protocol::server::{RetentionPolicy, Server, ServerConfig};
    use crate::protocol::wire::InProcess;

    fn spec() -> ModelSpec {
        ModelSpec {
            seed: 21,
            hidden_dim: 12,
            vocab_size: 24,
            num_experts: 0,
            top_k_tokens: 6,
            top_k_experts: None,
            max_steps: 10,
        }
    }

    fn server(attack: Option<DeviationConfig>, alpha: f64) -> Server {
        Server::new(
            ServerConfig {
                spec: spec(),
                deviation: DeviationConfig::reference(),
                attack_deviation: attack,
                alpha,
                logging: LoggingMode::Full,
                distance_kind: DistanceKind::TV,
                retention: RetentionPolicy::default(),
            },
            99,
        )
        .unwrap()
    }

    fn auditor(t1: f64, t2: f64) -> Auditor {
        let expected = crate::commit::commit_model(&spec());
        Auditor::new(
            AuditorConfig {
                vocab_size: 24,
                prompt_len: (2, 6),
                params: AuditParams {
                    t1,
                    t2,
                    estimated_fp: 0.0,
                    estimated_detection: 1.0,
                },
                expected_model_commitment: expected,
            },
            7,
        )
    }

    #[test]
    fn honest_server_probes_clean() {
        let mut server = server(None, 0.0);
        let mut auditor = auditor(0.1, 0.0);
        let mut transport = InProcess::new(&mut server);
        for _ in 0..5 {
            let record = auditor.probe(&mut transport).unwrap();
            assert!(
                matches!(record.outcome, ProbeOutcome::Clean(_)),
                "{:?}",
                record.outcome
            );
        }
    }

    #[test]
    fn substituting_server_flags() {
        let mut server = server(Some(DeviationConfig::substituted(2.0)), 1.0);
        let mut auditor = auditor(0.1, 0.05);
        let mut transport = InProcess::new(&mut server);
        let record = auditor.probe(&mut transport).unwrap();
        assert!(matches!(record.outcome, ProbeOutcome::Flagged(_)), "{:?}", record.outcome);
    }

    #[test]
    fn wrong_model_commitment_is_bottom() {
        let mut server = server(None, 0.0);
        let mut pinned = spec();
        pinned.seed += 1;
        let mut auditor = Auditor::new(
            AuditorConfig {
                vocab_size: 24,
                prompt_len: (2, 6),
                params: AuditParams { t1: 0.1, t2: 0.0, estimated_fp: 0.0, estimated_detection: 1.0 },
                expected_model_commitment: crate::commit::commit_model(&pinned),
            },
            8,
        );
        let mut transport = InProcess::new(&mut server);
        let record = auditor.probe(&mut transport).unwrap();
        assert_eq!(
            record.outcome,
            ProbeOutcome::Bottom("model_commitment_mismatch".to_string())
        );
        assert!(record.outcome.detected());
    }

    #[test]
    fn purged_log_yields_bottom() {
        let mut srv = server(None, 0.0);
        let mut auditor = auditor(0.1, 0.0);
        // Expire everything between the request and the audit: answer the
        // request, purge, then replay only the audit.
        let request_id = auditor.fresh_id();
        let prompt = auditor.fresh_prompt().unwrap();
        let reply = srv.handle_message(Message::Request { request_id, prompt });
        assert!(matches!(reply, Message::Response { .. }));
        srv.advance_time(90_000).unwrap();
        let reply = srv.handle_message(Message::Audit { request_id });
        let Message::Error { code, .. } = reply else { panic!() };
        assert_eq!(code, super::super::message::error_code::AUDIT_UNAVAILABLE);
    }

    #[test]
    fn campaign_accept_rule() {
        let mut srv = server(None, 0.0);
        let mut honest = auditor(0.1, 0.0);
        let mut transport = InProcess::new(&mut srv);
        let report = honest.run_campaign(&mut transport, 10, 0).unwrap();
        assert_eq!(report.n_audits, 10);
        assert_eq!(report.flags, 0);
        assert!(report.accept);

        let mut srv = server(Some(DeviationConfig::substituted(2.0)), 1.0);
        let mut suspicious = auditor(0.1, 0.05);
        let mut transport = InProcess::new(&mut srv);
        let report = suspicious.run_campaign(&mut transport, 10, 2).unwrap();
        assert!(report.flags > 2);
        assert!(!report.accept);
    }

    #[test]
    fn probe_ids_are_unique_and_deterministic() {
        let mk = |seed| {
            let mut a = Auditor::new(
                AuditorConfig {
                    vocab_size: 24,
                    prompt_len: (2, 6),
                    params: AuditParams {
                        t1: 0.1,
                        t2: 0.0,
                        estimated_fp: 0.0,
                        estimated_detection: 1.0,
                    },
                    expected_model_commitment: crate::commit::commit_model(&spec()),
                },
                seed,
            );
            (a.fresh_id(), a.fresh_id())
        };
        let (a1, a2) = mk(5);
        assert_ne!(a1, a2);
        assert_eq!(mk(5), mk(5));
        assert_ne!(mk(5), mk(6));
        assert_eq!(a1.get_version(), Some(uuid::Version::Random));
    }
}
