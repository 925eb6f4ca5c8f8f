//! Commit-then-prove audit protocol: server, auditor, verifiable-compute
//! re-execution, log store, and wire codec.
//!
//! The flow per request: a client (or auditor) sends `Request`; the server
//! executes its deployed model, logs the full opening, and answers
//! `Response` carrying output, token count, and a trace commitment. An
//! auditor that sent the request may immediately send `Audit`; the server
//! must then open its commitment inside the trusted re-execution
//! ([`vc::vc_execute`]), which replays the full-precision reference under
//! the committed decisions and returns per-step distances. The auditor
//! applies the calibrated two-threshold rule to those distances.
//!
//! Trust model: `vc_execute` stands in for an attested enclave; it sees the
//! server's witness but runs our code. Everything else is untrusted.

pub mod auditor;
pub mod message;
pub mod server;
pub mod store;
pub mod vc;
pub mod wire;

pub use auditor::{Auditor, AuditorConfig, CampaignReport, ProbeError, ProbeOutcome, ProbeRecord};
pub use message::{LddReport, Message, RequestId, VcReport};
pub use server::{RetentionPolicy, Server, ServerConfig, ServerError};
pub use store::{LogEntry, LogStore, StoreError};
pub use vc::{vc_execute, VcInputs, VcWitness};
pub use wire::{InProcess, TcpTransport, Transport, WireError};
