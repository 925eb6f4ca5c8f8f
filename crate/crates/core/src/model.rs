//! Synthetic hybrid-computation model.
//!
//! The model realizes the recurrence `h_0 = E(x)`, `(h~_i, l_i) = F(h_{i-1})`,
//! `d_i = S(l_i, r_i)`, `h_i = G(h~_i, d_i)`, `(y, T) = D({d_i})` with seeded
//! dense affine maps and a softsign nonlinearity. Weights derive from a
//! counter-mode PRF over `ModelSpec::seed`, so the full-precision reference is a
//! pure function of `(spec, prompt, decisions)` and re-executes bit-exactly.
//!
//! Deviations perturb logits only, never the hidden state, so a
//! control-flow-aligned reference run recovers the exact per-step deviation.
//!
//! Noise families:
//! * `Benign` — i.i.d. Gaussian with std `noise_sigma`, fresh per request.
//! * `Quantized` — zero-mean Gaussian scale mixture with total std
//!   `noise_sigma`: a [`QUANT_OUTLIER_PROB`] fraction of coordinates draw at
//!   [`QUANT_OUTLIER_RATIO`]`* noise_sigma`. Rounding error is mostly small
//!   with rare activation outliers, and the tail mass is what a distance
//!   audit sees.
//! * `Substituted` — a fixed per-coordinate sign pattern times `bias_scale`,
//!   and/or wholesale weight substitution via `substitute_seed`.
//! * `Overreport` — appends `dummy_steps` dummy decisions after the natural
//!   end; the dummy update is the identity and reconstruction reports `T + K`
//!   while `y` is untouched.
//! * `Fabricated` — commits logits drawn near the reference
//!   (`fabrication_sigma` jitter) independently of any claimed deviant
//!   execution, and samples decisions from them; observationally a benign
//!   server at `fabrication_sigma`, which is exactly why fabrication does not
//!   pay.

use crate::prf;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Designated stop token is `vocab_size - 1`.
pub fn stop_token(vocab_size: usize) -> u32 {
    vocab_size as u32 - 1
}

/// Peak value of the synthetic logit record for an overreport dummy step.
/// `exp(-DUMMY_PEAK)` underflows to zero, so the softmax is an exact point
/// mass and decision re-derivation is deterministic.
pub const DUMMY_PEAK: f64 = 1000.0;

/// Fraction of quantized-noise coordinates drawn from the outlier component.
pub const QUANT_OUTLIER_PROB: f64 = 0.005;
/// Outlier component std as a multiple of `noise_sigma`.
pub const QUANT_OUTLIER_RATIO: f64 = 12.0;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("prompt token {0} out of range")]
    InvalidPrompt(u32),
    #[error("shape mismatch: got {got}, want {want}")]
    ShapeError { got: usize, want: usize },
    #[error("k={k} exceeds logit length {len}")]
    InvalidK { k: usize, len: usize },
    #[error("invalid decision at step {0}")]
    InvalidDecision(u32),
    #[error("alignment failed at step {0}")]
    AlignmentError(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("invalid spec: {0}")]
    InvalidSpec(&'static str),
    #[error("invalid deviation config: {0}")]
    InvalidDeviation(&'static str),
}

/// Parameters of the synthetic hybrid model; the unit of "claimed model".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Derives all weights via a seeded PRF.
    pub seed: u64,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// 0 disables mixture-of-experts routing.
    pub num_experts: usize,
    pub top_k_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k_experts: Option<usize>,
    /// Cap on the number of discrete decisions per request.
    pub max_steps: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 {
            return Err(ModelError::InvalidSpec("hidden_dim must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidSpec("vocab_size must be at least 2"));
        }
        if self.top_k_tokens == 0 || self.top_k_tokens > self.vocab_size {
            return Err(ModelError::InvalidSpec("top_k_tokens must be in 1..=vocab_size"));
        }
        if self.max_steps == 0 {
            return Err(ModelError::InvalidSpec("max_steps must be positive"));
        }
        match (self.num_experts, self.top_k_experts) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(ModelError::InvalidSpec("top_k_experts set but num_experts is 0"))
            }
            (_, None) => {
                return Err(ModelError::InvalidSpec("top_k_experts required when num_experts > 0"))
            }
            (n, Some(k)) if k == 0 || k > n => {
                return Err(ModelError::InvalidSpec("top_k_experts must be in 1..=num_experts"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn moe_enabled(&self) -> bool {
        self.num_experts > 0
    }

    pub fn stop_token(&self) -> u32 {
        stop_token(self.vocab_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviationKind {
    Benign,
    Quantized,
    Substituted,
    Overreport,
    Fabricated,
}

/// Which deviation the deployed model applies on top of the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationConfig {
    pub kind: DeviationKind,
    /// Zero-mean per-logit noise std (`Benign` uses sigma_b, `Quantized`
    /// uses sigma_q > sigma_b).
    pub noise_sigma: f64,
    /// Systematic logit offset magnitude for `Substituted`.
    pub bias_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substitute_seed: Option<u64>,
    /// Dummy step count K for `Overreport`.
    pub dummy_steps: usize,
    /// Jitter of fabricated commitments around the reference.
    pub fabrication_sigma: f64,
}

impl DeviationConfig {
    /// Benign with the given noise std; sigma 0 is the exact reference.
    pub fn benign(noise_sigma: f64) -> Self {
        DeviationConfig {
            kind: DeviationKind::Benign,
            noise_sigma,
            bias_scale: 0.0,
            substitute_seed: None,
            dummy_steps: 0,
            fabrication_sigma: 0.0,
        }
    }

    pub fn reference() -> Self {
        Self::benign(0.0)
    }

    pub fn quantized(noise_sigma: f64) -> Self {
        DeviationConfig { kind: DeviationKind::Quantized, ..Self::benign(noise_sigma) }
    }

    pub fn substituted(bias_scale: f64) -> Self {
        DeviationConfig { kind: DeviationKind::Substituted, bias_scale, ..Self::benign(0.0) }
    }

    pub fn substituted_weights(seed: u64) -> Self {
        DeviationConfig {
            kind: DeviationKind::Substituted,
            substitute_seed: Some(seed),
            ..Self::benign(0.0)
        }
    }

    pub fn overreport(dummy_steps: usize) -> Self {
        DeviationConfig { kind: DeviationKind::Overreport, dummy_steps, ..Self::benign(0.0) }
    }

    pub fn fabricated(fabrication_sigma: f64) -> Self {
        DeviationConfig { kind: DeviationKind::Fabricated, fabrication_sigma, ..Self::benign(0.0) }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.noise_sigma < 0.0 || self.bias_scale < 0.0 || self.fabrication_sigma < 0.0 {
            return Err(ModelError::InvalidDeviation("negative magnitude"));
        }
        match self.kind {
            DeviationKind::Benign => {
                if self.bias_scale != 0.0 || self.dummy_steps != 0 || self.substitute_seed.is_some()
                {
                    return Err(ModelError::InvalidDeviation(
                        "benign deviation admits noise only",
                    ));
                }
            }
            DeviationKind::Quantized => {
                if self.noise_sigma <= 0.0 {
                    return Err(ModelError::InvalidDeviation("quantized requires noise_sigma > 0"));
                }
                if self.dummy_steps != 0 {
                    return Err(ModelError::InvalidDeviation("quantized has no dummy steps"));
                }
            }
            DeviationKind::Substituted => {
                if self.bias_scale == 0.0 && self.substitute_seed.is_none() {
                    return Err(ModelError::InvalidDeviation(
                        "substituted requires bias_scale or substitute_seed",
                    ));
                }
                if self.dummy_steps != 0 {
                    return Err(ModelError::InvalidDeviation("substituted has no dummy steps"));
                }
            }
            DeviationKind::Overreport => {
                if self.dummy_steps == 0 {
                    return Err(ModelError::InvalidDeviation("overreport requires dummy_steps >= 1"));
                }
            }
            DeviationKind::Fabricated => {
                if self.dummy_steps != 0 {
                    return Err(ModelError::InvalidDeviation("fabricated has no dummy steps"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    TokenSample,
    ExpertRoute,
}

/// Discrete decision value: a sampled token id, or the routed expert set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecisionValue {
    Token(u32),
    Experts(Vec<u32>),
}

impl DecisionValue {
    pub fn token(&self) -> Option<u32> {
        match self {
            DecisionValue::Token(t) => Some(*t),
            DecisionValue::Experts(_) => None,
        }
    }
}

/// Logged payload of a step: full logits, or only the runtime top-K indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepRecord {
    Full { logits: Vec<f64> },
    Compact { top_k_indices: Vec<u32> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoggingMode {
    Full,
    CompactTopK,
}

/// Per-decision record of one hybrid step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step_index: u32,
    pub decision_kind: DecisionKind,
    #[serde(flatten)]
    pub record: StepRecord,
    pub decision: DecisionValue,
    pub rand_tag: u64,
}

mod hex32 {
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

/// Output of one execution: visible tokens, reported count, and the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub output_tokens: Vec<u32>,
    pub reported_token_count: u64,
    pub trace: Vec<StepTrace>,
    #[serde(with = "hex32")]
    pub seed_r: [u8; 32],
}

/// Reconstruction `D`: `y` is the token decisions before the first stop
/// token, `T` counts every token-sampling decision (dummy steps included).
pub fn reconstruct<'a, I>(decisions: I, stop: u32) -> (Vec<u32>, u64)
where
    I: IntoIterator<Item = (DecisionKind, &'a DecisionValue)>,
{
    let mut y = Vec::new();
    let mut t = 0u64;
    let mut stopped = false;
    for (kind, d) in decisions {
        if kind != DecisionKind::TokenSample {
            continue;
        }
        t += 1;
        if stopped {
            continue;
        }
        match d.token() {
            Some(tok) if tok == stop => stopped = true,
            Some(tok) => y.push(tok),
            None => {}
        }
    }
    (y, t)
}

/// Returns the `Overreport` configuration realizing the transformed model
/// `M'`: `k_dummy` appended dummy decisions whose update is the identity and
/// whose reconstruction inflates `T` by `k_dummy` while leaving `y` alone.
pub fn transform_overreport(
    spec: &ModelSpec,
    k_dummy: usize,
) -> Result<(ModelSpec, DeviationConfig), ModelError> {
    if k_dummy == 0 {
        return Err(ModelError::InvalidArgument("k_dummy must be at least 1"));
    }
    spec.validate()?;
    Ok((spec.clone(), DeviationConfig::overreport(k_dummy)))
}

// Weight scale constants. W2_SCALE sets the logit spread, which controls how
// much softmax mass the top tokens hold and therefore how sensitive the TV
// distance is to logit perturbations.
const FOLD_SCALE: f64 = 1.0;
const EMBED_SCALE: f64 = 1.0;
const W1_SCALE: f64 = 1.5;
const B1_SCALE: f64 = 0.3;
const W2_SCALE: f64 = 4.0;
const B2_SCALE: f64 = 1.0;
const WG_SCALE: f64 = 1.2;
const GEMB_SCALE: f64 = 1.0;

fn squash(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Row-major matrix with seeded Gaussian entries.
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn seeded(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
        let sigma = scale / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Mat { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// out = M v + b (b optional), accumulated in declaration order.
    fn matvec(&self, v: &[f64], b: Option<&[f64]>, out: &mut Vec<f64>) {
        debug_assert_eq!(v.len(), self.cols);
        out.clear();
        out.reserve(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(v) {
                acc += w * x;
            }
            if let Some(bias) = b {
                acc += bias[r];
            }
            out.push(acc);
        }
    }
}

fn seeded_vec(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn sign_pattern(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

enum Head {
    Token,
    Expert,
}

/// A built model: spec plus derived weights. Building is cheap but not free,
/// so hot paths construct one `Model` and reuse it.
pub struct Model {
    spec: ModelSpec,
    h0: Vec<f64>,
    w_fold: Mat,
    w_embed: Mat,
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
    we: Option<Mat>,
    be: Vec<f64>,
    wg: Mat,
    g_embed: Mat,
    ge_embed: Option<Mat>,
    bias_pattern_token: Vec<f64>,
    bias_pattern_expert: Vec<f64>,
}

impl Model {
    /// Full-precision reference for `spec`.
    pub fn new(spec: &ModelSpec) -> Result<Model, ModelError> {
        Self::with_weight_seed(spec, spec.seed)
    }

    /// Deployed-side model honoring `substitute_seed` when present.
    pub fn deployed(spec: &ModelSpec, dev: &DeviationConfig) -> Result<Model, ModelError> {
        dev.validate()?;
        Self::with_weight_seed(spec, dev.substitute_seed.unwrap_or(spec.seed))
    }

    fn with_weight_seed(spec: &ModelSpec, weight_seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let h = spec.hidden_dim;
        let v = spec.vocab_size;
        let e = spec.num_experts;
        let mut rng = prf::stream(weight_seed, "weights");
        let h0 = seeded_vec(&mut rng, h, 1.0);
        let w_fold = Mat::seeded(&mut rng, h, h, FOLD_SCALE);
        let w_embed = Mat::seeded(&mut rng, v, h, EMBED_SCALE);
        let w1 = Mat::seeded(&mut rng, h, h, W1_SCALE);
        let b1 = seeded_vec(&mut rng, h, B1_SCALE);
        let w2 = Mat::seeded(&mut rng, v, h, W2_SCALE);
        let b2 = seeded_vec(&mut rng, v, B2_SCALE);
        let (we, be) = if e > 0 {
            (Some(Mat::seeded(&mut rng, e, h, W2_SCALE)), seeded_vec(&mut rng, e, B2_SCALE))
        } else {
            (None, Vec::new())
        };
        let wg = Mat::seeded(&mut rng, h, h, WG_SCALE);
        let g_embed = Mat::seeded(&mut rng, v, h, GEMB_SCALE);
        let ge_embed = if e > 0 { Some(Mat::seeded(&mut rng, e, h, GEMB_SCALE)) } else { None };
        let mut pattern_rng = prf::stream(weight_seed, "bias-pattern");
        let bias_pattern_token = sign_pattern(&mut pattern_rng, v);
        let bias_pattern_expert = sign_pattern(&mut pattern_rng, e.max(1));
        Ok(Model {
            spec: spec.clone(),
            h0,
            w_fold,
            w_embed,
            w1,
            b1,
            w2,
            b2,
            we,
            be,
            wg,
            g_embed,
            ge_embed,
            bias_pattern_token,
            bias_pattern_expert,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// `E`: deterministic, order-sensitive embedding of the prompt.
    pub fn embed(&self, prompt: &[u32]) -> Result<Vec<f64>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::InvalidArgument("prompt must be non-empty"));
        }
        for &t in prompt {
            if t as usize >= self.spec.vocab_size {
                return Err(ModelError::InvalidPrompt(t));
            }
        }
        let mut h = self.h0.clone();
        let mut pre = Vec::with_capacity(self.spec.hidden_dim);
        for &t in prompt {
            self.w_fold.matvec(&h, Some(self.w_embed.row(t as usize)), &mut pre);
            h.clear();
            h.extend(pre.iter().map(|&x| squash(x)));
        }
        Ok(h)
    }

    fn forward(&self, state: &[f64], head: &Head) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if state.len() != self.spec.hidden_dim {
            return Err(ModelError::ShapeError { got: state.len(), want: self.spec.hidden_dim });
        }
        let mut pre = Vec::new();
        self.w1.matvec(state, Some(&self.b1), &mut pre);
        let intermediate: Vec<f64> = pre.iter().map(|&x| squash(x)).collect();
        let mut logits = Vec::new();
        match head {
            Head::Token => self.w2.matvec(&intermediate, Some(&self.b2), &mut logits),
            Head::Expert => {
                let we = self.we.as_ref().expect("expert head requires num_experts > 0");
                we.matvec(&intermediate, Some(&self.be), &mut logits)
            }
        }
        Ok((intermediate, logits))
    }

    /// `F` plus the configured deviation: produces the intermediate state and
    /// the (possibly perturbed) logits for the step. With `noise_sigma = 0`
    /// and no substitution the output equals the full-precision reference
    /// bitwise.
    pub fn step(
        &self,
        dev: &DeviationConfig,
        state: &[f64],
        step_index: u32,
        kind: DecisionKind,
        noise: &mut NoiseStream,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let head = match kind {
            DecisionKind::TokenSample => Head::Token,
            DecisionKind::ExpertRoute => Head::Expert,
        };
        let (intermediate, mut logits) = self.forward(state, &head)?;
        let _ = step_index;
        noise.apply(dev, &mut logits);
        if dev.kind == DeviationKind::Substituted && dev.bias_scale > 0.0 {
            let pattern = match kind {
                DecisionKind::TokenSample => &self.bias_pattern_token,
                DecisionKind::ExpertRoute => &self.bias_pattern_expert,
            };
            for (l, s) in logits.iter_mut().zip(pattern) {
                *l += dev.bias_scale * s;
            }
        }
        Ok((intermediate, logits))
    }

    /// `G`: folds a decision into the intermediate state. Distinct decisions
    /// produce distinct states, which is what makes control-flow alignment
    /// load-bearing.
    pub fn update(
        &self,
        intermediate: &[f64],
        decision: &DecisionValue,
    ) -> Result<Vec<f64>, ModelError> {
        if intermediate.len() != self.spec.hidden_dim {
            return Err(ModelError::ShapeError {
                got: intermediate.len(),
                want: self.spec.hidden_dim,
            });
        }
        let mut pre = Vec::new();
        match decision {
            DecisionValue::Token(t) => {
                if *t as usize >= self.spec.vocab_size {
                    return Err(ModelError::InvalidDecision(*t));
                }
                self.wg.matvec(intermediate, Some(self.g_embed.row(*t as usize)), &mut pre);
            }
            DecisionValue::Experts(set) => {
                let ge = self.ge_embed.as_ref().ok_or(ModelError::InvalidArgument(
                    "expert decision on a model without experts",
                ))?;
                let want = self.spec.top_k_experts.unwrap_or(0);
                if set.len() != want || !is_sorted_unique(set) {
                    return Err(ModelError::InvalidArgument("malformed expert set"));
                }
                for &ex in set {
                    if ex as usize >= self.spec.num_experts {
                        return Err(ModelError::InvalidDecision(ex));
                    }
                }
                let mut mix = vec![0.0; self.spec.hidden_dim];
                for &ex in set {
                    for (m, w) in mix.iter_mut().zip(ge.row(ex as usize)) {
                        *m += w;
                    }
                }
                let inv = 1.0 / set.len() as f64;
                for m in mix.iter_mut() {
                    *m *= inv;
                }
                self.wg.matvec(intermediate, Some(&mix), &mut pre);
            }
        }
        Ok(pre.iter().map(|&x| squash(x)).collect())
    }

    /// Free-running execution up to `max_steps` or the stop token, recording
    /// a `StepTrace` at every discrete decision. Overreport dummy steps leave
    /// the hidden state untouched.
    pub fn run(
        &self,
        dev: &DeviationConfig,
        prompt: &[u32],
        seed_r: &[u8; 32],
        logging: LoggingMode,
    ) -> Result<ExecutionResult, ModelError> {
        dev.validate()?;
        let spec = &self.spec;
        let stop = spec.stop_token();
        let mut noise = NoiseStream::new(seed_r, dev);
        let mut trace: Vec<StepTrace> = Vec::new();
        let mut h = self.embed(prompt)?;
        let mut step_index = 0u32;
        'outer: while trace.len() < spec.max_steps {
            if spec.moe_enabled() {
                let (intermediate, logits) =
                    self.step(dev, &h, step_index, DecisionKind::ExpertRoute, &mut noise)?;
                let k = spec.top_k_experts.unwrap();
                let experts = top_k_indices(&logits, k)?;
                let decision = DecisionValue::Experts(experts.clone());
                // Routing is committed in compact form regardless of mode.
                trace.push(StepTrace {
                    step_index,
                    decision_kind: DecisionKind::ExpertRoute,
                    record: StepRecord::Compact { top_k_indices: experts },
                    decision: decision.clone(),
                    rand_tag: prf::step_rand_tag(seed_r, step_index),
                });
                h = self.update(&intermediate, &decision)?;
                step_index += 1;
                if trace.len() >= spec.max_steps {
                    break 'outer;
                }
            }
            let (intermediate, logits) =
                self.step(dev, &h, step_index, DecisionKind::TokenSample, &mut noise)?;
            let tag = prf::step_rand_tag(seed_r, step_index);
            let d = select(&logits, tag, spec.top_k_tokens)?;
            let record = match logging {
                LoggingMode::Full => StepRecord::Full { logits },
                LoggingMode::CompactTopK => {
                    StepRecord::Compact { top_k_indices: top_k_indices(&logits, spec.top_k_tokens)? }
                }
            };
            trace.push(StepTrace {
                step_index,
                decision_kind: DecisionKind::TokenSample,
                record,
                decision: DecisionValue::Token(d),
                rand_tag: tag,
            });
            step_index += 1;
            if d == stop {
                break 'outer;
            }
            h = self.update(&intermediate, &DecisionValue::Token(d))?;
        }
        if dev.kind == DeviationKind::Overreport {
            for _ in 0..dev.dummy_steps {
                trace.push(dummy_step(spec, seed_r, step_index, logging));
                step_index += 1;
            }
        }
        let (y, t) = reconstruct(trace.iter().map(|s| (s.decision_kind, &s.decision)), stop);
        Ok(ExecutionResult {
            output_tokens: y,
            reported_token_count: t,
            trace,
            seed_r: *seed_r,
        })
    }

    /// Control-flow-aligned re-execution: runs the full-precision reference
    /// but enforces `decisions[i]` at every discrete point instead of calling
    /// the selection rule. Executes every enforced decision even past a stop
    /// token; alignment overrides stopping.
    pub fn reexecute_aligned(
        &self,
        prompt: &[u32],
        decisions: &[(DecisionKind, DecisionValue)],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if decisions.len() > self.spec.max_steps {
            return Err(ModelError::AlignmentError(self.spec.max_steps));
        }
        let mut h = self.embed(prompt)?;
        let mut out = Vec::with_capacity(decisions.len());
        for (i, (kind, decision)) in decisions.iter().enumerate() {
            let head = match kind {
                DecisionKind::TokenSample => Head::Token,
                DecisionKind::ExpertRoute => Head::Expert,
            };
            let (intermediate, logits) = self.forward(&h, &head)?;
            h = self.update(&intermediate, decision).map_err(|_| ModelError::AlignmentError(i))?;
            out.push(logits);
        }
        Ok(out)
    }
}

fn dummy_step(spec: &ModelSpec, seed_r: &[u8; 32], step_index: u32, logging: LoggingMode) -> StepTrace {
    let stop = spec.stop_token();
    let record = match logging {
        LoggingMode::Full => {
            let mut logits = vec![0.0; spec.vocab_size];
            logits[stop as usize] = DUMMY_PEAK;
            StepRecord::Full { logits }
        }
        LoggingMode::CompactTopK => {
            let mut logits = vec![0.0; spec.vocab_size];
            logits[stop as usize] = DUMMY_PEAK;
            StepRecord::Compact {
                top_k_indices: top_k_indices(&logits, spec.top_k_tokens).unwrap(),
            }
        }
    };
    StepTrace {
        step_index,
        decision_kind: DecisionKind::TokenSample,
        record,
        decision: DecisionValue::Token(stop),
        rand_tag: prf::step_rand_tag(seed_r, step_index),
    }
}

fn is_sorted_unique(v: &[u32]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Indices of the k largest logits, ties broken toward lower index, returned
/// in ascending index order.
pub fn top_k_indices(logits: &[f64], k: usize) -> Result<Vec<u32>, ModelError> {
    if k > logits.len() {
        return Err(ModelError::InvalidK { k, len: logits.len() });
    }
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut top: Vec<u32> = idx[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// `S`: restricts to the k largest logits (lower index wins boundary ties)
/// and samples one index from their softmax weights with the PRF draw carried
/// by `rand_tag`. Deterministic given `(logits, rand_tag, k)`.
pub fn select(logits: &[f64], rand_tag: u64, k: usize) -> Result<u32, ModelError> {
    if k == 0 || k > logits.len() {
        return Err(ModelError::InvalidK { k, len: logits.len() });
    }
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let top = &idx[..k];
    let max = logits[top[0] as usize];
    let weights: Vec<f64> = top.iter().map(|&i| (logits[i as usize] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = prf::unit_from_tag(rand_tag) * total;
    let mut acc = 0.0;
    for (w, &i) in weights.iter().zip(top) {
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(top[k - 1])
}

/// Per-run logit noise source. All draws descend from the per-request seed,
/// so a request replays exactly, while distinct requests get fresh noise.
pub struct NoiseStream {
    rng: Option<ChaCha8Rng>,
}

impl NoiseStream {
    pub fn new(seed_r: &[u8; 32], dev: &DeviationConfig) -> NoiseStream {
        let label = match dev.kind {
            DeviationKind::Fabricated => "fabricate",
            _ => "noise",
        };
        let sigma = effective_sigma(dev);
        let rng = if sigma > 0.0 { Some(prf::stream_from_bytes(seed_r, label)) } else { None };
        NoiseStream { rng }
    }

    /// Silent source for reference execution.
    pub fn silent() -> NoiseStream {
        NoiseStream { rng: None }
    }

    fn apply(&mut self, dev: &DeviationConfig, logits: &mut [f64]) {
        let Some(rng) = self.rng.as_mut() else { return };
        let sigma = effective_sigma(dev);
        match dev.kind {
            DeviationKind::Quantized => {
                // Gaussian scale mixture with total std exactly sigma.
                let var_out = QUANT_OUTLIER_PROB * QUANT_OUTLIER_RATIO * QUANT_OUTLIER_RATIO;
                let sigma_small =
                    sigma * ((1.0 - var_out) / (1.0 - QUANT_OUTLIER_PROB)).max(0.0).sqrt();
                let sigma_out = sigma * QUANT_OUTLIER_RATIO;
                for l in logits.iter_mut() {
                    let outlier = rng.random::<f64>() < QUANT_OUTLIER_PROB;
                    let z: f64 = StandardNormal.sample(rng);
                    *l += z * if outlier { sigma_out } else { sigma_small };
                }
            }
            _ => {
                for l in logits.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *l += sigma * z;
                }
            }
        }
    }
}

fn effective_sigma(dev: &DeviationConfig) -> f64 {
    match dev.kind {
        DeviationKind::Fabricated => dev.fabrication_sigma,
        _ => dev.noise_sigma,
    }
}
