//! Command-line front end: ceremonies, campaigns, report reduction, and
//! plan arithmetic over one JSON run configuration.
//!
//! Every run draws all randomness from `rng_seed` through named PRF
//! sub-streams, so rerunning a command with the same config produces byte
//! identical output files. Files never embed timestamps; timing goes to
//! stderr.
//!
//! Exit codes: 0 success, 1 internal error, 2 calibration or plan
//! infeasible, 3 server unreachable, 64 usage error, 66 missing input.

use crate::audit_math::{plan_campaign, AuditMathError, CampaignPlan};
use crate::calibrate::{run_ceremony, AuditParams, CalibrationError, CeremonyInput, RequestStats};
use crate::commit::commit_model;
use crate::ldd::{self, TAIL_THRESHOLDS};
use crate::metrics::DistanceKind;
use crate::model::{DeviationConfig, LoggingMode, ModelSpec};
use crate::prf;
use crate::protocol::{
    Auditor, AuditorConfig, CampaignReport, InProcess, Message, ProbeOutcome, ProbeRecord,
    RetentionPolicy, Server, ServerConfig, TcpTransport,
};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_CONNECT: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_MISSING_INPUT: i32 = 66;

fn default_prompt_len() -> (usize, usize) {
    (8, 64)
}

fn default_detection_target() -> f64 {
    0.05
}

fn default_t1_grid() -> Vec<f64> {
    vec![0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5]
}

fn default_bins() -> usize {
    50
}

/// One self-contained pipeline configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Baseline deviation every non-attack request runs under.
    pub deviation: DeviationConfig,
    /// Ceremony attack corpus; campaign servers mix it in at the plan's
    /// alpha.
    #[serde(default)]
    pub attack_deviation: Option<DeviationConfig>,
    pub logging_mode: LoggingMode,
    /// Requests per ceremony corpus.
    pub corpus_size: usize,
    pub distance_kind: DistanceKind,
    #[serde(default)]
    pub audit_params: Option<AuditParams>,
    #[serde(default)]
    pub campaign: Option<CampaignPlan>,
    pub output_dir: PathBuf,
    pub rng_seed: u64,
    /// Inclusive prompt length bounds for generated requests.
    #[serde(default = "default_prompt_len")]
    pub prompt_len: (usize, usize),
    #[serde(default = "default_detection_target")]
    pub detection_target: f64,
    #[serde(default = "default_t1_grid")]
    pub t1_grid: Vec<f64>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub retention: RetentionPolicy,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput(String),
    Infeasible(String),
    Connect(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Connect(_) => EXIT_CONNECT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m)
            | CliError::MissingInput(m)
            | CliError::Infeasible(m)
            | CliError::Connect(m)
            | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn internal(e: impl fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "ldd-audit",
    version,
    about = "Audit LLM inference through logit distance distributions"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate (t1, t2) thresholds from benign and attack corpora.
    Ceremony(CeremonyArgs),
    /// Run an audit campaign and emit verdicts, histograms, and the report.
    Campaign(CampaignArgs),
    /// Reduce campaign outputs to plot-ready histogram and tail tables.
    Report(ReportArgs),
    /// Size a campaign from the binomial audit arithmetic.
    Plan(PlanArgs),
}

#[derive(Args, Debug)]
struct JobArgs {
    /// Run configuration JSON.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Dotted-path config overrides, e.g. --set model.vocab_size=64.
    #[arg(long = "set", value_name = "KEY=VAL")]
    set: Vec<String>,
    /// Overrides output_dir from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides rng_seed from the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CeremonyArgs {
    #[command(flatten)]
    job: JobArgs,
    /// Reuse an earlier verdict CSV as the benign corpus instead of
    /// generating one.
    #[arg(long, value_name = "CSV", requires = "attack_csv")]
    benign_csv: Option<PathBuf>,
    /// Attack-corpus verdict CSV, paired with --benign-csv.
    #[arg(long, value_name = "CSV", requires = "benign_csv")]
    attack_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[command(flatten)]
    job: JobArgs,
    /// Audit a remote server over TCP instead of the in-process one.
    #[arg(long, value_name = "ADDR")]
    connect: Option<String>,
    /// Probe parallelism; takes effect with --connect, default sequential.
    #[arg(long, value_name = "N", default_value_t = 1)]
    parallel: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One campaign directory, or a benign then an attack directory.
    #[arg(value_name = "DIR", num_args = 1..=2, required = true)]
    dirs: Vec<PathBuf>,
    /// Destination directory; defaults to the first input directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Dishonesty fraction alpha the plan must defend against.
    #[arg(long)]
    alpha: f64,
    /// Per-audited-deviating-request detection probability.
    #[arg(long)]
    detect: f64,
    /// Evasion probability bound eta.
    #[arg(long)]
    eta: f64,
    /// Per-request benign false-positive rate.
    #[arg(long)]
    fp: f64,
    /// Campaign-level false-reject budget.
    #[arg(long)]
    target: f64,
}

/// Parses `args` and runs one command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let result = match &cli.command {
        Command::Ceremony(args) => cmd_ceremony(args),
        Command::Campaign(args) => cmd_campaign(args),
        Command::Report(args) => cmd_report(args),
        Command::Plan(args) => cmd_plan(args),
    };
    match result {
        Ok(()) => {
            eprintln!("done in {:.3}s", started.elapsed().as_secs_f64());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(job: &JobArgs) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(&job.config).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(format!("{}: not found", job.config.display()))
        } else {
            internal(e)
        }
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", job.config.display())))?;
    for kv in &job.set {
        apply_override(&mut value, kv)?;
    }
    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    if let Some(out) = &job.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = job.seed {
        config.rng_seed = seed;
    }
    config.model.validate().map_err(|e| CliError::Usage(format!("config: model: {e}")))?;
    config
        .deviation
        .validate()
        .map_err(|e| CliError::Usage(format!("config: deviation: {e}")))?;
    if let Some(attack) = &config.attack_deviation {
        attack
            .validate()
            .map_err(|e| CliError::Usage(format!("config: attack_deviation: {e}")))?;
    }
    let (lo, hi) = config.prompt_len;
    if lo == 0 || hi < lo {
        return Err(CliError::Usage(format!("config: prompt_len [{lo}, {hi}] is empty")));
    }
    Ok(config)
}

/// Sets one dotted-path key in the raw config value, creating intermediate
/// objects as needed. The value parses as JSON when it can, else as a string.
fn apply_override(root: &mut serde_json::Value, kv: &str) -> Result<(), CliError> {
    let Some((key, raw)) = kv.split_once('=') else {
        return Err(CliError::Usage(format!("--set expects KEY=VAL, got {kv:?}")));
    };
    let val: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: {part} is not an object")))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("--set {key}: parent is not an object")))?
        .insert(parts[parts.len() - 1].to_string(), val);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(internal)?;
    }
    fs::write(path, text).map_err(internal)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(internal)?;
    text.push('\n');
    write_text(path, &text)
}

/// Compact encoding for the large per-request report.
fn write_json_compact<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string(value).map_err(internal)?;
    text.push('\n');
    write_text(path, &text)
}

fn random_prompt<R: Rng>(rng: &mut R, vocab_size: usize, len_range: (usize, usize)) -> Vec<u32> {
    let len = rng.random_range(len_range.0..=len_range.1);
    (0..len).map(|_| rng.random_range(0..vocab_size as u32)).collect()
}

/// Generates one corpus: runs `corpus_size` requests under `deviation` on a
/// fresh server and audits every one.
fn collect_corpus(
    config: &RunConfig,
    deviation: &DeviationConfig,
    label: &str,
) -> Result<Vec<RequestStats>, CliError> {
    let server_config = ServerConfig {
        spec: config.model.clone(),
        deviation: deviation.clone(),
        attack_deviation: None,
        alpha: 0.0,
        logging: config.logging_mode,
        distance_kind: config.distance_kind,
        retention: config.retention.clone(),
    };
    let seed = prf::stream(config.rng_seed, label).random::<u64>();
    let mut server = Server::new(server_config, seed).map_err(internal)?;
    // Both corpora share one prompt stream so they differ only by deviation.
    let mut rng = prf::stream(config.rng_seed, "ceremony-prompts");
    let mut corpus = Vec::with_capacity(config.corpus_size);
    for _ in 0..config.corpus_size {
        let mut id_bytes = [0u8; 16];
        rng.fill(&mut id_bytes);
        let request_id = uuid::Builder::from_random_bytes(id_bytes).into_uuid();
        let prompt = random_prompt(&mut rng, config.model.vocab_size, config.prompt_len);
        let reply = server.handle_message(Message::Request { request_id, prompt });
        if !matches!(reply, Message::Response { .. }) {
            return Err(internal(format!("corpus request failed: {reply:?}")));
        }
        let reply = server.handle_message(Message::Audit { request_id });
        let Message::Proof { ldd_report, .. } = reply else {
            return Err(internal(format!("corpus audit failed: {reply:?}")));
        };
        if ldd_report.vc.aborted {
            return Err(internal(format!(
                "corpus proof aborted: {:?}",
                ldd_report.vc.abort_reason
            )));
        }
        corpus.push(RequestStats {
            samples: ldd_report.vc.distance_samples.iter().map(|s| s.value).collect(),
        });
    }
    Ok(corpus)
}

fn cmd_ceremony(args: &CeremonyArgs) -> Result<(), CliError> {
    let config = load_config(&args.job)?;
    let (benign, attack) = match (&args.benign_csv, &args.attack_csv) {
        (Some(benign), Some(attack)) => (read_corpus_csv(benign)?, read_corpus_csv(attack)?),
        _ => {
            let Some(attack_dev) = &config.attack_deviation else {
                return Err(CliError::Usage(
                    "ceremony needs attack_deviation in the config (or --benign-csv/--attack-csv)"
                        .to_string(),
                ));
            };
            if config.corpus_size == 0 {
                return Err(CliError::Usage("corpus_size must be at least 1".to_string()));
            }
            (
                collect_corpus(&config, &config.deviation, "ceremony-benign")?,
                collect_corpus(&config, attack_dev, "ceremony-attack")?,
            )
        }
    };
    let input = CeremonyInput {
        benign_stats: benign,
        attack_stats: attack,
        detection_target: config.detection_target,
    };
    let params = run_ceremony(&input, &config.t1_grid).map_err(|e| match e {
        CalibrationError::CalibrationInfeasible => CliError::Infeasible(e.to_string()),
        CalibrationError::BadTarget(_) | CalibrationError::BadGrid => {
            CliError::Usage(e.to_string())
        }
        other => internal(other),
    })?;
    write_json(&config.output_dir.join("audit_params.json"), &params)?;
    println!(
        "t1={} t2={} estimated_fp={:e} estimated_detection={}",
        params.t1, params.t2, params.estimated_fp, params.estimated_detection
    );
    Ok(())
}

fn cmd_campaign(args: &CampaignArgs) -> Result<(), CliError> {
    let config = load_config(&args.job)?;
    let Some(plan) = config.campaign.clone() else {
        return Err(CliError::Usage(
            "campaign needs a campaign plan in the config; size one with the plan subcommand"
                .to_string(),
        ));
    };
    if plan.n_audits == 0 {
        return Err(CliError::Usage("campaign needs n_audits >= 1".to_string()));
    }
    let params = match &config.audit_params {
        Some(p) => p.clone(),
        None => {
            let path = config.output_dir.join("audit_params.json");
            let text = fs::read_to_string(&path).map_err(|_| {
                CliError::Usage(format!(
                    "no audit_params in the config and no {}; run ceremony first",
                    path.display()
                ))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
    };
    let auditor_config = AuditorConfig {
        vocab_size: config.model.vocab_size,
        prompt_len: config.prompt_len,
        params,
        expected_model_commitment: commit_model(&config.model),
    };

    let report = if let Some(addr) = &args.connect {
        campaign_remote(addr, &config, &auditor_config, &plan, args.parallel)?
    } else {
        if args.parallel > 1 {
            eprintln!("note: --parallel takes effect with --connect; probing sequentially");
        }
        let server_config = ServerConfig {
            spec: config.model.clone(),
            deviation: config.deviation.clone(),
            attack_deviation: config.attack_deviation.clone(),
            alpha: plan.alpha,
            logging: config.logging_mode,
            distance_kind: config.distance_kind,
            retention: config.retention.clone(),
        };
        let mut server = Server::new(server_config, config.rng_seed).map_err(internal)?;
        let mut auditor = Auditor::new(auditor_config, config.rng_seed);
        let mut transport = InProcess::new(&mut server);
        auditor
            .run_campaign(&mut transport, plan.n_audits, plan.reject_threshold_k)
            .map_err(internal)?
    };

    write_campaign_outputs(&config, &report)?;
    if report.accept {
        println!(
            "ACCEPT: flags={} <= k={} over n={} audits",
            report.flags, report.reject_threshold_k, report.n_audits
        );
    } else {
        println!(
            "REJECT: flags={} > k={} over n={} audits",
            report.flags, report.reject_threshold_k, report.n_audits
        );
    }
    Ok(())
}

fn campaign_remote(
    addr: &str,
    config: &RunConfig,
    auditor_config: &AuditorConfig,
    plan: &CampaignPlan,
    parallel: usize,
) -> Result<CampaignReport, CliError> {
    let connect = |addr: &str| {
        TcpTransport::connect(addr).map_err(|e| CliError::Connect(format!("{addr}: {e}")))
    };
    if parallel <= 1 {
        let mut transport = connect(addr)?;
        let mut auditor = Auditor::new(auditor_config.clone(), config.rng_seed);
        return auditor
            .run_campaign(&mut transport, plan.n_audits, plan.reject_threshold_k)
            .map_err(|e| CliError::Connect(e.to_string()));
    }
    let workers = parallel.min(plan.n_audits as usize);
    let base = plan.n_audits / workers as u64;
    let extra = plan.n_audits % workers as u64;
    let records: Result<Vec<Vec<ProbeRecord>>, CliError> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let quota = base + u64::from((w as u64) < extra);
                let worker_config = auditor_config.clone();
                scope.spawn(move || -> Result<Vec<ProbeRecord>, CliError> {
                    let mut transport = connect(addr)?;
                    // Distinct sub-stream per worker keeps the merge
                    // deterministic for a fixed worker count.
                    let mut auditor =
                        Auditor::new(worker_config, config.rng_seed.wrapping_add(1 + w as u64));
                    let mut records = Vec::with_capacity(quota as usize);
                    for _ in 0..quota {
                        records.push(
                            auditor
                                .probe(&mut transport)
                                .map_err(|e| CliError::Connect(e.to_string()))?,
                        );
                    }
                    Ok(records)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| internal("campaign worker panicked"))?)
            .collect()
    });
    let records: Vec<ProbeRecord> = records?.into_iter().flatten().collect();
    let flags = records.iter().filter(|r| r.outcome.detected()).count() as u64;
    Ok(CampaignReport {
        n_audits: plan.n_audits,
        flags,
        reject_threshold_k: plan.reject_threshold_k,
        accept: flags <= plan.reject_threshold_k,
        params: auditor_config.params.clone(),
        records,
    })
}

fn write_campaign_outputs(config: &RunConfig, report: &CampaignReport) -> Result<(), CliError> {
    let out = &config.output_dir;
    write_json_compact(&out.join("campaign_report.json"), report)?;
    write_text(&out.join("verdicts.csv"), &verdicts_csv(&report.records))?;
    let token: Vec<f64> =
        report.records.iter().flat_map(|r| r.token_samples.iter().copied()).collect();
    if token.is_empty() {
        eprintln!("note: no token distances collected; skipping histogram.json");
    } else {
        let hist = ldd::build_histogram(&token, config.histogram_bins).map_err(internal)?;
        write_json(&out.join("histogram.json"), &hist)?;
    }
    let expert: Vec<f64> =
        report.records.iter().flat_map(|r| r.expert_samples.iter().copied()).collect();
    if !expert.is_empty() {
        let hist = ldd::build_histogram(&expert, config.histogram_bins).map_err(internal)?;
        write_json(&out.join("histogram_expert.json"), &hist)?;
    }
    Ok(())
}

fn join_samples(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{v}"));
    }
    s
}

fn verdicts_csv(records: &[ProbeRecord]) -> String {
    let mut csv = String::from(
        "request_id,outcome,reason,p_t1,flagged,num_steps,flagged_steps,output_len,reported_token_count,samples,expert_samples\n",
    );
    for r in records {
        let (outcome, reason, p_t1, flagged, num_steps) = match &r.outcome {
            ProbeOutcome::Clean(v) => {
                ("clean", String::new(), format!("{}", v.p_t1), "false", v.num_steps)
            }
            ProbeOutcome::Flagged(v) => {
                ("flagged", String::new(), format!("{}", v.p_t1), "true", v.num_steps)
            }
            ProbeOutcome::Bottom(reason) => {
                ("bottom", reason.clone(), String::new(), "true", r.token_samples.len())
            }
        };
        csv.push_str(&format!(
            "{},{outcome},{reason},{p_t1},{flagged},{num_steps},{},{},{},{},{}\n",
            r.request_id,
            r.flagged_steps,
            r.output_len,
            r.reported_token_count,
            join_samples(&r.token_samples),
            join_samples(&r.expert_samples),
        ));
    }
    csv
}

/// Minimal CSV row splitter; fields never contain commas or quotes by
/// construction.
fn csv_fields(line: &str) -> Vec<&str> {
    line.split(',').collect()
}

fn read_verdicts(path: &Path) -> Result<Vec<VerdictRow>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(format!("{}: not found", path.display()))
        } else {
            internal(e)
        }
    })?;
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return Err(CliError::MissingInput(format!("{}: empty", path.display())));
    };
    let columns = csv_fields(header);
    let col = |name: &str| {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| CliError::Usage(format!("{}: missing column {name}", path.display())))
    };
    let (c_outcome, c_samples, c_expert) = (col("outcome")?, col("samples")?, col("expert_samples")?);
    let parse_samples = |field: &str, line: usize| -> Result<Vec<f64>, CliError> {
        field
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    CliError::Usage(format!("{}:{line}: bad sample {tok:?}", path.display()))
                })
            })
            .collect()
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields = csv_fields(line);
        if fields.len() != columns.len() {
            return Err(CliError::Usage(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                i + 2,
                columns.len(),
                fields.len()
            )));
        }
        rows.push(VerdictRow {
            outcome: fields[c_outcome].to_string(),
            samples: parse_samples(fields[c_samples], i + 2)?,
            expert_samples: parse_samples(fields[c_expert], i + 2)?,
        });
    }
    Ok(rows)
}

struct VerdictRow {
    outcome: String,
    samples: Vec<f64>,
    expert_samples: Vec<f64>,
}

fn read_corpus_csv(path: &Path) -> Result<Vec<RequestStats>, CliError> {
    let corpus: Vec<RequestStats> = read_verdicts(path)?
        .into_iter()
        .filter(|row| row.outcome != "bottom" && !row.samples.is_empty())
        .map(|row| RequestStats { samples: row.samples })
        .collect();
    if corpus.is_empty() {
        return Err(CliError::MissingInput(format!(
            "{}: no rows with distance samples",
            path.display()
        )));
    }
    Ok(corpus)
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let mut corpora = Vec::new();
    for dir in &args.dirs {
        let rows = read_verdicts(&dir.join("verdicts.csv"))?;
        let token: Vec<f64> = rows.iter().flat_map(|r| r.samples.iter().copied()).collect();
        let expert: Vec<f64> =
            rows.iter().flat_map(|r| r.expert_samples.iter().copied()).collect();
        if token.is_empty() {
            return Err(CliError::MissingInput(format!(
                "{}: verdicts.csv holds no distance samples",
                dir.display()
            )));
        }
        corpora.push((token, expert));
    }
    let labels: Vec<&str> =
        if corpora.len() == 2 { vec!["benign", "attack"] } else { vec!["campaign"] };
    let out = args.out.clone().unwrap_or_else(|| args.dirs[0].clone());

    let mut hist_csv = String::from("corpus,stream,bin_lo,bin_hi,count,frac\n");
    let mut tail_csv = String::from("corpus,stream,threshold,tail_prob\n");
    for (label, (token, expert)) in labels.iter().zip(&corpora) {
        for (stream, values) in [("token", token), ("expert", expert)] {
            if values.is_empty() {
                continue;
            }
            for (lo, hi, count) in log_bins(values, 40) {
                let frac = count as f64 / values.len() as f64;
                hist_csv.push_str(&format!("{label},{stream},{lo},{hi},{count},{frac}\n"));
            }
            for tau in TAIL_THRESHOLDS {
                let tail = ldd::tail_statistic(values, tau).map_err(internal)?;
                tail_csv.push_str(&format!("{label},{stream},{tau},{tail}\n"));
            }
        }
    }
    write_text(&out.join("histogram.csv"), &hist_csv)?;
    write_text(&out.join("tail_table.csv"), &tail_csv)?;

    if corpora.len() == 2 {
        let rows = ldd::separation_report_at(&corpora[0].0, &corpora[1].0, &TAIL_THRESHOLDS)
            .map_err(internal)?;
        let mut sep = String::from("threshold,benign_tail,attack_tail,ratio,ordered\n");
        for row in rows {
            let ratio = match row.ratio {
                Some(r) => format!("{r}"),
                None => "inf".to_string(),
            };
            sep.push_str(&format!(
                "{},{},{},{ratio},{}\n",
                row.tau, row.benign_tail, row.attack_tail, row.ordered
            ));
        }
        write_text(&out.join("separation.csv"), &sep)?;
    }
    Ok(())
}

/// Log-spaced bins over the positive samples, with a leading bin for exact
/// zeros. Plot-ready for a logarithmic x-axis.
fn log_bins(values: &[f64], bins: usize) -> Vec<(f64, f64, u64)> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let min_pos = values.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    if !min_pos.is_finite() {
        return vec![(0.0, max, values.len() as u64)];
    }
    let zeros = values.iter().filter(|v| **v == 0.0).count() as u64;
    if max <= min_pos {
        return vec![(0.0, min_pos, zeros), (min_pos, max, values.len() as u64 - zeros)];
    }
    let ratio = max / min_pos;
    let mut edges = Vec::with_capacity(bins + 1);
    for j in 0..=bins {
        edges.push(min_pos * ratio.powf(j as f64 / bins as f64));
    }
    edges[bins] = max;
    let mut rows = vec![(0.0, min_pos, zeros)];
    for j in 0..bins {
        let (lo, hi) = (edges[j], edges[j + 1]);
        let count = values
            .iter()
            .filter(|&&v| v > 0.0 && v >= lo && (v < hi || (j == bins - 1 && v <= hi)))
            .count() as u64;
        rows.push((lo, hi, count));
    }
    rows
}

fn cmd_plan(args: &PlanArgs) -> Result<(), CliError> {
    let outcome = plan_campaign(args.alpha, args.detect, args.eta, args.fp, args.target)
        .map_err(|e| match e {
            AuditMathError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            AuditMathError::Infeasible => CliError::Infeasible(e.to_string()),
        })?;
    println!("{}", serde_json::to_string_pretty(&outcome).map_err(internal)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_key() {
        let mut v: serde_json::Value = serde_json::json!({"model": {"seed": 1}});
        apply_override(&mut v, "model.seed=9").unwrap();
        apply_override(&mut v, "campaign.alpha=0.1").unwrap();
        apply_override(&mut v, "output_dir=/tmp/x").unwrap();
        assert_eq!(v["model"]["seed"], 9);
        assert_eq!(v["campaign"]["alpha"], 0.1);
        assert_eq!(v["output_dir"], "/tmp/x");
    }

    #[test]
    fn override_without_equals_is_usage() {
        let mut v = serde_json::json!({});
        let err = apply_override(&mut v, "model.seed").unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn log_bins_cover_all_samples() {
        let values = [0.0, 0.0, 1e-4, 3e-3, 0.2, 0.5, 1.0];
        let rows = log_bins(&values, 10);
        let total: u64 = rows.iter().map(|r| r.2).sum();
        assert_eq!(total, values.len() as u64);
        assert_eq!(rows[0], (0.0, 1e-4, 2));
    }

    #[test]
    fn log_bins_all_zero_collapse() {
        let rows = log_bins(&[0.0, 0.0], 10);
        assert_eq!(rows, vec![(0.0, 0.0, 2)]);
    }

    #[test]
    fn samples_round_trip_through_csv() {
        let line = join_samples(&[0.1, 1e-9, 0.0, 0.3333333333333333]);
        let parsed: Vec<f64> =
            line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(parsed, vec![0.1, 1e-9, 0.0, 0.3333333333333333]);
    }

    #[test]
    fn help_exits_zero_and_bad_flag_sixty_four() {
        assert_eq!(run(["ldd-audit", "--help"]), EXIT_OK);
        assert_eq!(run(["ldd-audit", "plan", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["ldd-audit"]), EXIT_USAGE);
    }
}
