//! Inference server: answers requests, keeps the commitment log, and serves
//! audits by handing the witness to the trusted re-execution.
//!
//! The server owns two models: the deployed baseline and an optional attack
//! model selected per request with probability `alpha`. Auditors cannot tell
//! from a response which one served it; only the audit path reveals the
//! deviation through the distance distribution.

use super::message::{error_code, Message, RequestId, VcReport};
use super::store::{LogEntry, LogStore, StoreError};
use super::vc::{vc_execute, VcInputs, VcWitness};
use crate::commit::{commit_model, commit_trace, Commitment};
use crate::metrics::DistanceKind;
use crate::model::{DeviationConfig, LoggingMode, Model, ModelError, ModelSpec};
use crate::prf;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Bounds on the commitment log. Entries beyond either bound are purged;
/// audits for purged requests answer `audit_unavailable`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub max_entries: usize,
    pub max_age_secs: u64,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy { max_entries: 1_000_000, max_age_secs: 86_400 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServerConfig {
    pub spec: ModelSpec,
    /// Deviation applied to every non-attack request. `reference()` for an
    /// honest server, or e.g. a benign noise floor.
    pub deviation: DeviationConfig,
    /// When set, each request is served by this deviation with probability
    /// `alpha` instead of the baseline.
    pub attack_deviation: Option<DeviationConfig>,
    pub alpha: f64,
    pub logging: LoggingMode,
    pub distance_kind: DistanceKind,
    #[serde(default)]
    pub retention: RetentionPolicy,
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
}

pub struct Server {
    config: ServerConfig,
    deployed: Model,
    attack: Option<Model>,
    store: LogStore,
    rng: ChaCha8Rng,
    /// Coarse logical clock in seconds; drives retention, not wall time.
    now: u64,
    model_commitment: Commitment,
}

impl Server {
    pub fn new(config: ServerConfig, seed: u64) -> Result<Self, ServerError> {
        Self::with_store(config, seed, LogStore::in_memory())
    }

    /// Same as [`Server::new`] with a journal-backed log.
    pub fn persistent(
        config: ServerConfig,
        seed: u64,
        journal: &Path,
    ) -> Result<Self, ServerError> {
        let store = LogStore::persistent(journal)?;
        Self::with_store(config, seed, store)
    }

    fn with_store(config: ServerConfig, seed: u64, store: LogStore) -> Result<Self, ServerError> {
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(ServerError::BadAlpha(config.alpha));
        }
        let deployed = Model::deployed(&config.spec, &config.deviation)?;
        let attack = match &config.attack_deviation {
            Some(dev) => Some(Model::deployed(&config.spec, dev)?),
            None => None,
        };
        let model_commitment = commit_model(&config.spec);
        Ok(Server {
            deployed,
            attack,
            store,
            rng: prf::stream(seed, "server"),
            now: 0,
            model_commitment,
            config,
        })
    }

    pub fn model_commitment(&self) -> &Commitment {
        &self.model_commitment
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn log_len(&self) -> usize {
        self.store.len()
    }

    /// Advances the logical clock and drops entries past the age bound.
    pub fn advance_time(&mut self, secs: u64) -> Result<usize, ServerError> {
        self.now += secs;
        let purged = self
            .store
            .purge_older_than(self.now, self.config.retention.max_age_secs)?;
        Ok(purged)
    }

    pub fn handle_message(&mut self, msg: Message) -> Message {
        match msg {
            Message::Request { request_id, prompt } => self.handle_request(request_id, prompt),
            Message::Audit { request_id } => self.handle_audit(request_id),
            other => Message::Error {
                request_id: other.request_id(),
                code: error_code::MALFORMED.to_string(),
                detail: "server accepts request and audit messages".to_string(),
            },
        }
    }

    fn handle_request(&mut self, request_id: RequestId, prompt: Vec<u32>) -> Message {
        if prompt.is_empty() || prompt.iter().any(|&t| t as usize >= self.config.spec.vocab_size) {
            return Message::Error {
                request_id,
                code: error_code::INVALID_PROMPT.to_string(),
                detail: format!("prompt must be nonempty tokens < {}", self.config.spec.vocab_size),
            };
        }
        let mut seed_r = [0u8; 32];
        self.rng.fill(&mut seed_r);
        let use_attack = self.attack.is_some() && self.rng.random::<f64>() < self.config.alpha;
        let (model, dev) = if use_attack {
            (self.attack.as_ref().unwrap(), self.config.attack_deviation.as_ref().unwrap())
        } else {
            (&self.deployed, &self.config.deviation)
        };
        let result = match model.run(dev, &prompt, &seed_r, self.config.logging) {
            Ok(r) => r,
            Err(e) => {
                return Message::Error {
                    request_id,
                    code: error_code::INTERNAL.to_string(),
                    detail: e.to_string(),
                }
            }
        };
        let commitment = commit_trace(&result.seed_r, &result.trace);
        let response = Message::Response {
            request_id,
            output_tokens: result.output_tokens.clone(),
            reported_token_count: result.reported_token_count,
            trace_commitment: commitment.clone(),
        };
        let entry = LogEntry {
            request_id,
            prompt,
            result,
            commitment,
            created_at: self.now,
            retained: true,
        };
        if let Err(e) = self.store.put(entry) {
            let code = match e {
                StoreError::DuplicateId(_) => error_code::DUPLICATE_ID,
                _ => error_code::INTERNAL,
            };
            return Message::Error { request_id, code: code.to_string(), detail: e.to_string() };
        }
        if let Err(e) = self.store.evict_to_capacity(self.config.retention.max_entries) {
            return Message::Error {
                request_id,
                code: error_code::INTERNAL.to_string(),
                detail: e.to_string(),
            };
        }
        response
    }

    fn handle_audit(&mut self, request_id: RequestId) -> Message {
        let Some(entry) = self.store.get(&request_id) else {
            return Message::Error {
                request_id,
                code: error_code::AUDIT_UNAVAILABLE.to_string(),
                detail: "request not in the retained log".to_string(),
            };
        };
        let report = self.prove(entry);
        let vc_ok = report.passed();
        Message::Proof {
            request_id,
            ldd_report: super::message::LddReport { request_id, vc: report },
            vc_ok,
        }
    }

    fn prove(&self, entry: &LogEntry) -> VcReport {
        let opening = crate::commit::TraceOpening {
            seed_r: entry.result.seed_r,
            trace: entry.result.trace.clone(),
        };
        vc_execute(
            &VcInputs {
                model_commitment: &self.model_commitment,
                trace_commitment: &entry.commitment,
                prompt: &entry.prompt,
                output_tokens: &entry.result.output_tokens,
                reported_token_count: entry.result.reported_token_count,
                distance_kind: self.config.distance_kind,
            },
            &VcWitness { spec: &self.config.spec, opening: &opening },
        )
    }

    /// Flushes the journal index if the log is persistent.
    pub fn flush(&mut self) -> Result<(), ServerError> {
        self.store.flush()?;
        Ok(())
    }
}
