//! C ABI over the auditing library.
//!
//! Conventions:
//! * every fallible function returns an `int32_t` status from the `LDD_*`
//!   set and writes results through out-pointers;
//! * on any non-zero status, [`ldd_last_error`] returns a thread-local
//!   message valid until the next call on the same thread;
//! * strings returned as `char*` are owned by the caller and must be
//!   released with [`ldd_string_free`];
//! * `LddServer` and `LddAuditor` are opaque; structured data crosses the
//!   boundary as JSON using the same schemas as the wire protocol and the
//!   CLI config files.
//!
//! The canonical header lives at `include/ldd_audit.h`.

use ldd_audit::calibrate::{self, EvtFit};
use ldd_audit::protocol::{Auditor, AuditorConfig, Server, ServerConfig, Transport, WireError};
use ldd_audit::protocol::Message;
use ldd_audit::{audit_math, metrics};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;
use std::slice;

pub const LDD_OK: i32 = 0;
pub const LDD_ERR_INVALID_ARGUMENT: i32 = 1;
pub const LDD_ERR_NULL_POINTER: i32 = 2;
pub const LDD_ERR_COMPUTATION: i32 = 3;
pub const LDD_ERR_UTF8: i32 = 4;
pub const LDD_ERR_JSON: i32 = 5;
pub const LDD_ERR_UNAVAILABLE: i32 = 6;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(cleaned).unwrap_or_default());
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

fn fail(code: i32, msg: impl AsRef<str>) -> i32 {
    set_error(msg.as_ref());
    code
}

/// Message for the most recent failure on this thread, or null after a
/// success. The pointer stays valid until the next FFI call on the thread.
#[no_mangle]
pub extern "C" fn ldd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map(|s| s.as_ptr()).unwrap_or(ptr::null())
    })
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn ldd_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Frees a string returned by this library. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ldd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if ptr.is_null() && len > 0 {
        None
    } else if len == 0 {
        Some(&[])
    } else {
        Some(slice::from_raw_parts(ptr, len))
    }
}

fn string_out(s: String) -> *mut c_char {
    match CString::new(s) {
        Ok(c) => c.into_raw(),
        Err(_) => {
            set_error("string contains interior NUL");
            ptr::null_mut()
        }
    }
}

/// Total variation distance between softmax(a) and softmax(b).
///
/// # Safety
/// `a` and `b` must point to `len` readable doubles and `out` to a writable
/// double.
#[no_mangle]
pub unsafe extern "C" fn ldd_tv_distance(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> i32 {
    clear_error();
    let (Some(a), Some(b)) = (slice_arg(a, len), slice_arg(b, len)) else {
        return fail(LDD_ERR_NULL_POINTER, "null logits pointer");
    };
    if out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null out pointer");
    }
    match metrics::tv_distance(a, b) {
        Ok(v) => {
            *out = v;
            LDD_OK
        }
        Err(e) => fail(LDD_ERR_INVALID_ARGUMENT, e.to_string()),
    }
}

/// KL divergence KL(softmax(a) || softmax(b)).
///
/// # Safety
/// Same contract as [`ldd_tv_distance`].
#[no_mangle]
pub unsafe extern "C" fn ldd_kl_divergence(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> i32 {
    clear_error();
    let (Some(a), Some(b)) = (slice_arg(a, len), slice_arg(b, len)) else {
        return fail(LDD_ERR_NULL_POINTER, "null logits pointer");
    };
    if out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null out pointer");
    }
    match metrics::kl_divergence(a, b) {
        Ok(v) => {
            *out = v;
            LDD_OK
        }
        Err(e) => fail(LDD_ERR_INVALID_ARGUMENT, e.to_string()),
    }
}

/// Minimal L1 perturbation of `logits` making `target_set` its exact top-k.
///
/// # Safety
/// `logits` must point to `len` doubles, `target_set` to `k` indices, `out`
/// to a writable double.
#[no_mangle]
pub unsafe extern "C" fn ldd_topk_distance(
    logits: *const f64,
    len: usize,
    target_set: *const u32,
    k: usize,
    out: *mut f64,
) -> i32 {
    clear_error();
    let (Some(logits), Some(target)) = (slice_arg(logits, len), slice_arg(target_set, k)) else {
        return fail(LDD_ERR_NULL_POINTER, "null input pointer");
    };
    if out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null out pointer");
    }
    match metrics::topk_distance(logits, target, k) {
        Ok(v) => {
            *out = v;
            LDD_OK
        }
        Err(e) => fail(LDD_ERR_INVALID_ARGUMENT, e.to_string()),
    }
}

/// Audits needed so an alpha-dishonest server evades with probability at
/// most eta.
///
/// # Safety
/// `out` must point to a writable uint64.
#[no_mangle]
pub unsafe extern "C" fn ldd_required_samples(
    alpha: f64,
    p_detect: f64,
    eta: f64,
    out: *mut u64,
) -> i32 {
    clear_error();
    if out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null out pointer");
    }
    match audit_math::required_samples(alpha, p_detect, eta) {
        Ok(n) => {
            *out = n;
            LDD_OK
        }
        Err(e) => fail(LDD_ERR_INVALID_ARGUMENT, e.to_string()),
    }
}

/// P[more than k false flags in n audits] at per-request rate fp.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn ldd_false_reject_prob(n: u64, fp: f64, k: u64, out: *mut f64) -> i32 {
    clear_error();
    if out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null out pointer");
    }
    if !(0.0..=1.0).contains(&fp) {
        return fail(LDD_ERR_INVALID_ARGUMENT, "fp must lie in [0, 1]");
    }
    *out = audit_math::false_reject_prob(n, fp, k);
    LDD_OK
}

/// P[more than k flags in n audits] at per-request flag rate p.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn ldd_detect_prob(n: u64, p: f64, k: u64, out: *mut f64) -> i32 {
    clear_error();
    if out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null out pointer");
    }
    if !(0.0..=1.0).contains(&p) {
        return fail(LDD_ERR_INVALID_ARGUMENT, "p must lie in [0, 1]");
    }
    *out = audit_math::detect_prob(n, p, k);
    LDD_OK
}

/// Generalized Pareto tail fit, C layout.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LddEvtFit {
    pub threshold_u: f64,
    pub shape_xi: f64,
    pub scale_beta: f64,
    pub exceed_rate: f64,
    pub n_exceedances: u64,
}

impl From<EvtFit> for LddEvtFit {
    fn from(f: EvtFit) -> Self {
        LddEvtFit {
            threshold_u: f.threshold_u,
            shape_xi: f.shape_xi,
            scale_beta: f.scale_beta,
            exceed_rate: f.exceed_rate,
            n_exceedances: f.n_exceedances as u64,
        }
    }
}

impl From<LddEvtFit> for EvtFit {
    fn from(f: LddEvtFit) -> Self {
        EvtFit {
            threshold_u: f.threshold_u,
            shape_xi: f.shape_xi,
            scale_beta: f.scale_beta,
            exceed_rate: f.exceed_rate,
            n_exceedances: f.n_exceedances as usize,
        }
    }
}

/// Peaks-over-threshold GPD fit of the upper `tail_fraction` of `samples`.
///
/// # Safety
/// `samples` must point to `len` doubles, `out` to a writable [`LddEvtFit`].
#[no_mangle]
pub unsafe extern "C" fn ldd_fit_evt(
    samples: *const f64,
    len: usize,
    tail_fraction: f64,
    out: *mut LddEvtFit,
) -> i32 {
    clear_error();
    let Some(samples) = slice_arg(samples, len) else {
        return fail(LDD_ERR_NULL_POINTER, "null samples pointer");
    };
    if out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null out pointer");
    }
    match calibrate::fit_evt(samples, tail_fraction) {
        Ok(fit) => {
            *out = fit.into();
            LDD_OK
        }
        Err(e) => fail(LDD_ERR_COMPUTATION, e.to_string()),
    }
}

/// False-positive rate P[p > t2] under a fitted tail.
///
/// # Safety
/// `fit` must point to a readable [`LddEvtFit`], `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn ldd_estimate_fp_evt(
    fit: *const LddEvtFit,
    t2: f64,
    out: *mut f64,
) -> i32 {
    clear_error();
    if fit.is_null() || out.is_null() {
        return fail(LDD_ERR_NULL_POINTER, "null pointer");
    }
    let fit: EvtFit = (*fit).into();
    match calibrate::estimate_fp_evt(&fit, t2) {
        Ok(v) => {
            *out = v;
            LDD_OK
        }
        Err(e) => fail(LDD_ERR_COMPUTATION, e.to_string()),
    }
}

/// Opaque audited inference server.
pub struct LddServer {
    inner: Server,
}

/// Opaque campaign auditor.
pub struct LddAuditor {
    inner: Auditor,
}

unsafe fn json_arg<T: serde::de::DeserializeOwned>(
    ptr: *const c_char,
    what: &str,
) -> Result<T, (i32, String)> {
    if ptr.is_null() {
        return Err((LDD_ERR_NULL_POINTER, format!("null {what} pointer")));
    }
    let text = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (LDD_ERR_UTF8, format!("{what} is not UTF-8")))?;
    serde_json::from_str(text).map_err(|e| (LDD_ERR_JSON, format!("{what}: {e}")))
}

/// Builds a server from a `ServerConfig` JSON document. Returns null on
/// error; see [`ldd_last_error`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ldd_server_new(config_json: *const c_char, seed: u64) -> *mut LddServer {
    clear_error();
    let config: ServerConfig = match json_arg(config_json, "server config") {
        Ok(c) => c,
        Err((_, msg)) => {
            set_error(&msg);
            return ptr::null_mut();
        }
    };
    match Server::new(config, seed) {
        Ok(inner) => Box::into_raw(Box::new(LddServer { inner })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Handles one protocol message (JSON) and returns the JSON reply. The
/// caller frees the reply with [`ldd_string_free`].
///
/// # Safety
/// `server` must come from [`ldd_server_new`] and not be freed; the message
/// must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ldd_server_handle(
    server: *mut LddServer,
    message_json: *const c_char,
) -> *mut c_char {
    clear_error();
    let Some(server) = server.as_mut() else {
        set_error("null server pointer");
        return ptr::null_mut();
    };
    let msg: Message = match json_arg(message_json, "message") {
        Ok(m) => m,
        Err((_, msg)) => {
            set_error(&msg);
            return ptr::null_mut();
        }
    };
    let reply = server.inner.handle_message(msg);
    match serde_json::to_string(&reply) {
        Ok(s) => string_out(s),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// The server's model commitment as a JSON object.
///
/// # Safety
/// `server` must come from [`ldd_server_new`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn ldd_server_model_commitment(server: *const LddServer) -> *mut c_char {
    clear_error();
    let Some(server) = server.as_ref() else {
        set_error("null server pointer");
        return ptr::null_mut();
    };
    match serde_json::to_string(server.inner.model_commitment()) {
        Ok(s) => string_out(s),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Frees a server. Null is a no-op.
///
/// # Safety
/// `server` must come from [`ldd_server_new`] and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn ldd_server_free(server: *mut LddServer) {
    if !server.is_null() {
        drop(Box::from_raw(server));
    }
}

/// Builds an auditor from an `AuditorConfig` JSON document. Returns null on
/// error.
///
/// # Safety
/// `config_json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ldd_auditor_new(
    config_json: *const c_char,
    seed: u64,
) -> *mut LddAuditor {
    clear_error();
    let config: AuditorConfig = match json_arg(config_json, "auditor config") {
        Ok(c) => c,
        Err((_, msg)) => {
            set_error(&msg);
            return ptr::null_mut();
        }
    };
    Box::into_raw(Box::new(LddAuditor { inner: Auditor::new(config, seed) }))
}

struct ServerTransport<'a> {
    server: &'a mut Server,
}

impl Transport for ServerTransport<'_> {
    fn round_trip(&mut self, msg: &Message) -> Result<Message, WireError> {
        Ok(self.server.handle_message(msg.clone()))
    }
}

/// Runs one probe (request, audit, verdict) against an in-process server
/// and returns the `ProbeRecord` as JSON. The caller frees the string.
///
/// # Safety
/// Both handles must be live pointers from this library.
#[no_mangle]
pub unsafe extern "C" fn ldd_auditor_probe(
    auditor: *mut LddAuditor,
    server: *mut LddServer,
) -> *mut c_char {
    clear_error();
    let (Some(auditor), Some(server)) = (auditor.as_mut(), server.as_mut()) else {
        set_error("null handle");
        return ptr::null_mut();
    };
    let mut transport = ServerTransport { server: &mut server.inner };
    match auditor.inner.probe(&mut transport) {
        Ok(record) => match serde_json::to_string(&record) {
            Ok(s) => string_out(s),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        },
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Frees an auditor. Null is a no-op.
///
/// # Safety
/// `auditor` must come from [`ldd_auditor_new`] and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn ldd_auditor_free(auditor: *mut LddAuditor) {
    if !auditor.is_null() {
        drop(Box::from_raw(auditor));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn tv_and_kl_round_trip() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 2.0, 3.0];
        let mut out = f64::NAN;
        assert_eq!(unsafe { ldd_tv_distance(a.as_ptr(), b.as_ptr(), 3, &mut out) }, LDD_OK);
        assert_eq!(out, 0.0);
        assert_eq!(unsafe { ldd_kl_divergence(a.as_ptr(), b.as_ptr(), 3, &mut out) }, LDD_OK);
        assert_eq!(out, 0.0);
        assert!(unsafe { ldd_last_error() }.is_null());
    }

    #[test]
    fn null_pointers_are_reported() {
        let mut out = 0.0;
        let code = unsafe { ldd_tv_distance(std::ptr::null(), std::ptr::null(), 2, &mut out) };
        assert_eq!(code, LDD_ERR_NULL_POINTER);
        let msg = unsafe { CStr::from_ptr(ldd_last_error()) };
        assert!(msg.to_str().unwrap().contains("null"));
    }

    #[test]
    fn topk_matches_worked_example() {
        let logits = [1.0, 2.0, 3.0];
        let target = [0u32];
        let mut out = 0.0;
        let code =
            unsafe { ldd_topk_distance(logits.as_ptr(), 3, target.as_ptr(), 1, &mut out) };
        assert_eq!(code, LDD_OK);
        assert_eq!(out, 2.0);
    }

    #[test]
    fn arithmetic_matches_library() {
        let mut n = 0u64;
        assert_eq!(unsafe { ldd_required_samples(0.1, 0.01, 0.05, &mut n) }, LDD_OK);
        assert_eq!(n, 2995);
        let mut p = 0.0;
        assert_eq!(unsafe { ldd_false_reject_prob(3000, 1e-5, 3, &mut p) }, LDD_OK);
        assert!(p < 1e-7);
        assert_eq!(unsafe { ldd_detect_prob(3000, 1e-3, 3, &mut p) }, LDD_OK);
        assert!((0.30..=0.40).contains(&p));
        assert_eq!(
            unsafe { ldd_detect_prob(3000, 1.5, 3, &mut p) },
            LDD_ERR_INVALID_ARGUMENT
        );
    }

    #[test]
    fn evt_fit_on_exponential_tail() {
        let n = 10_000;
        let samples: Vec<f64> =
            (1..=n).map(|i| -((1.0 - i as f64 / (n as f64 + 1.0)).ln())).collect();
        let mut fit = LddEvtFit {
            threshold_u: 0.0,
            shape_xi: f64::NAN,
            scale_beta: 0.0,
            exceed_rate: 0.0,
            n_exceedances: 0,
        };
        assert_eq!(unsafe { ldd_fit_evt(samples.as_ptr(), samples.len(), 0.1, &mut fit) }, LDD_OK);
        assert!(fit.shape_xi.abs() < 0.15, "xi {}", fit.shape_xi);
        let mut fp = 0.0;
        assert_eq!(unsafe { ldd_estimate_fp_evt(&fit, fit.threshold_u + 1.0, &mut fp) }, LDD_OK);
        assert!(fp > 0.0 && fp < 0.1);
    }

    #[test]
    fn server_and_auditor_handles_run_a_probe() {
        let server_config = r#"{
            "spec": {"seed": 3, "hidden_dim": 12, "vocab_size": 24, "num_experts": 0,
                     "top_k_tokens": 6, "top_k_experts": null, "max_steps": 10},
            "deviation": {"kind": "Benign", "noise_sigma": 0.0, "bias_scale": 0.0,
                          "substitute_seed": null, "dummy_steps": 0, "fabrication_sigma": 0.0},
            "attack_deviation": null,
            "alpha": 0.0,
            "logging": "Full",
            "distance_kind": "TV"
        }"#;
        let config_c = CString::new(server_config).unwrap();
        let server = unsafe { ldd_server_new(config_c.as_ptr(), 5) };
        assert!(!server.is_null(), "{:?}", unsafe {
            CStr::from_ptr(ldd_last_error())
        });

        let commitment = unsafe { ldd_server_model_commitment(server) };
        assert!(!commitment.is_null());
        let commitment_json = unsafe { CStr::from_ptr(commitment) }.to_str().unwrap().to_string();
        let commitment_value: serde_json::Value = serde_json::from_str(&commitment_json).unwrap();
        unsafe { ldd_string_free(commitment) };

        let auditor_config = serde_json::json!({
            "vocab_size": 24,
            "prompt_len": [2, 6],
            "params": {"t1": 0.1, "t2": 0.0, "estimated_fp": 0.0, "estimated_detection": 1.0},
            "expected_model_commitment": commitment_value,
        });
        let auditor_c = CString::new(auditor_config.to_string()).unwrap();
        let auditor = unsafe { ldd_auditor_new(auditor_c.as_ptr(), 9) };
        assert!(!auditor.is_null());

        let record = unsafe { ldd_auditor_probe(auditor, server) };
        assert!(!record.is_null(), "{:?}", unsafe {
            CStr::from_ptr(ldd_last_error())
        });
        let record_json = unsafe { CStr::from_ptr(record) }.to_str().unwrap().to_string();
        unsafe { ldd_string_free(record) };
        let value: serde_json::Value = serde_json::from_str(&record_json).unwrap();
        assert!(value["outcome"]["Clean"].is_object(), "{record_json}");

        unsafe {
            ldd_auditor_free(auditor);
            ldd_server_free(server);
        }
    }

    #[test]
    fn server_handles_raw_messages() {
        let server_config = r#"{
            "spec": {"seed": 3, "hidden_dim": 12, "vocab_size": 24, "num_experts": 0,
                     "top_k_tokens": 6, "top_k_experts": null, "max_steps": 10},
            "deviation": {"kind": "Benign", "noise_sigma": 0.0, "bias_scale": 0.0,
                          "substitute_seed": null, "dummy_steps": 0, "fabrication_sigma": 0.0},
            "attack_deviation": null,
            "alpha": 0.0,
            "logging": "Full",
            "distance_kind": "TV"
        }"#;
        let config_c = CString::new(server_config).unwrap();
        let server = unsafe { ldd_server_new(config_c.as_ptr(), 5) };
        assert!(!server.is_null());

        let request = CString::new(
            r#"{"type": "request", "request_id": "00000000-0000-0000-0000-000000000001", "prompt": [1, 2, 3]}"#,
        )
        .unwrap();
        let reply = unsafe { ldd_server_handle(server, request.as_ptr()) };
        assert!(!reply.is_null());
        let reply_json = unsafe { CStr::from_ptr(reply) }.to_str().unwrap().to_string();
        unsafe { ldd_string_free(reply) };
        let value: serde_json::Value = serde_json::from_str(&reply_json).unwrap();
        assert_eq!(value["type"], "response", "{reply_json}");

        let audit = CString::new(
            r#"{"type": "audit", "request_id": "00000000-0000-0000-0000-000000000001"}"#,
        )
        .unwrap();
        let proof = unsafe { ldd_server_handle(server, audit.as_ptr()) };
        let proof_json = unsafe { CStr::from_ptr(proof) }.to_str().unwrap().to_string();
        unsafe { ldd_string_free(proof) };
        let value: serde_json::Value = serde_json::from_str(&proof_json).unwrap();
        assert_eq!(value["type"], "proof");
        assert_eq!(value["vc_ok"], true);

        let garbage = CString::new("not json").unwrap();
        let null_reply = unsafe { ldd_server_handle(server, garbage.as_ptr()) };
        assert!(null_reply.is_null());
        let msg = unsafe { CStr::from_ptr(ldd_last_error()) };
        assert!(msg.to_str().unwrap().contains("message"));

        unsafe { ldd_server_free(server) };
    }

    #[test]
    fn version_is_a_static_string() {
        let v = unsafe { CStr::from_ptr(ldd_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
