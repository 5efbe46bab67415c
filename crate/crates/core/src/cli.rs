//! The `aura` command-line tool.
//!
//! Every subcommand writes into its `--out` directory, starting with
//! `manifest.json`. Exit codes: 0 on success, 1 on usage or validation
//! errors, 2 on backend or runtime failures.

use crate::ambiguity::{self, AmbiguityError, BeliefPair};
use crate::data::report::{to_json_line, write_text};
use crate::data::{
    generate_synthetic, load_artifacts, load_dataset, save_dataset, save_partition, save_routing,
    write_json, BeliefDistribution, BeliefRole, DataError, Dataset, RationaleView, Split,
    SynthConfig,
};
use crate::evaluation::{
    self, compare, curve_csv, epoch_curve, ratio_sweep_with, report_from_routing, EvalError,
    Protocol, SweepSpec,
};
use crate::pipeline::{
    self, resolve_prior, Combiner, Mode, PipelineConfig, PipelineError, RunOutcome,
};
use crate::reasoner::{BatchSize, ReasonerError, TrainConfig, DEFAULT_DIM};
use crate::scoring::write_beliefs;
use crate::scoring::{BackendKind, BackendSpec, FileBackend, ScoringError};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

const SUBCOMMANDS: [&str; 10] = [
    "gen-synth",
    "validate",
    "score",
    "entropy",
    "partition",
    "run",
    "ood",
    "sweep",
    "epoch-curve",
    "evaluate",
];

/// Written to every `--out` directory before anything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Arguments exactly as invoked.
    pub command: Vec<String>,
    pub subcommand: String,
    /// Every option after `--config` merging and defaults, keyed like a
    /// `--config` file.
    pub config: Value,
    /// SHA-256 of every input file, keyed by the path given.
    pub input_digests: BTreeMap<String, String>,
    pub tool_version: String,
    pub timestamp: String,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } => 2,
        _ => 1,
    }
}

fn reasoner_code(e: &ReasonerError) -> i32 {
    match e {
        ReasonerError::NonFiniteLoss { .. }
        | ReasonerError::DimensionMismatch { .. }
        | ReasonerError::EmptyBatch => 2,
        ReasonerError::Data(d) => data_code(d),
        _ => 1,
    }
}

fn scoring_code(e: &ScoringError) -> i32 {
    match e {
        ScoringError::InvalidBackendSpec(_) => 1,
        ScoringError::Data(d) => data_code(d),
        ScoringError::Reasoner(r) => reasoner_code(r),
        _ => 2,
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Scoring(s) => scoring_code(s),
            PipelineError::Reasoner(r) => reasoner_code(r),
            PipelineError::Data(d) => data_code(d),
            PipelineError::InvalidConfig(_)
            | PipelineError::KMismatch { .. }
            | PipelineError::Ambiguity(_)
            | PipelineError::Eval(_) => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError {
            code: data_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        CliError {
            code: scoring_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<ReasonerError> for CliError {
    fn from(e: ReasonerError) -> Self {
        CliError {
            code: reasoner_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<AmbiguityError> for CliError {
    fn from(e: AmbiguityError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::usage(e.to_string())
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "aura",
    version,
    about = "Ambiguity-aware two-stage reasoning over rationales"
)]
struct Cli {
    /// Worker threads for parallel scoring and sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file whose keys supply any flag; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    #[serde(flatten)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
enum Command {
    /// Generate train/validation/test splits and a clean prior corpus.
    #[command(args_override_self = true)]
    GenSynth(GenSynthArgs),
    /// Check dataset files against the schema.
    #[command(args_override_self = true)]
    Validate(ValidateArgs),
    /// Score a dataset with a backend and write belief distributions.
    #[command(args_override_self = true)]
    Score(ScoreArgs),
    /// Rationale entropy of stored prior/posterior beliefs.
    #[command(args_override_self = true)]
    Entropy(EntropyArgs),
    /// Split stored beliefs into ambiguous and unambiguous instances.
    #[command(args_override_self = true)]
    Partition(PartitionArgs),
    /// Train and evaluate one pipeline run.
    #[command(args_override_self = true)]
    Run(RunArgs),
    /// Train on a source dataset and evaluate on a target dataset.
    #[command(args_override_self = true)]
    Ood(RunArgs),
    /// Accuracy across training ratios and seeds.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Train and validation accuracy after every epoch.
    #[command(args_override_self = true)]
    EpochCurve(CurveArgs),
    /// Recompute a stored run's accuracy, optionally against a baseline run.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, Serialize)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `-` streams JSONL records to standard output as well.
    #[arg(long)]
    emit: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct GenSynthArgs {
    /// Training instances.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Corruption rate.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.5)]
    cue_rate: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Defaults to n / 4.
    #[arg(long)]
    n_validation: Option<usize>,
    /// Defaults to n / 4.
    #[arg(long)]
    n_test: Option<usize>,
    /// Size of the clean prior corpus; defaults to n.
    #[arg(long)]
    n_prior: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    /// file:PATH | http:URL | builtin[:STATE], or a bare kind with --url.
    #[arg(long, default_value = "builtin")]
    backend: String,
    #[arg(long)]
    url: Option<String>,
    #[arg(long, default_value_t = crate::scoring::DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
    #[arg(long, default_value = "prior", value_parser = parse_role)]
    role: BeliefRole,
    #[arg(long, default_value = "per-choice", value_parser = parse_view)]
    rationale_view: RationaleView,
    #[command(flatten)]
    #[serde(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct EntropyArgs {
    /// Belief JSONL holding the prior distributions.
    #[arg(long)]
    prior: PathBuf,
    /// Belief JSONL holding the posterior distributions.
    #[arg(long)]
    posterior: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct PartitionArgs {
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    posterior: PathBuf,
    /// Threshold; defaults to the mean entropy of the input.
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize, Clone)]
struct TrainArgs {
    /// file:PATH | http:URL | builtin[:STATE]
    #[arg(long, default_value = "builtin")]
    prior_backend: String,
    /// Clean corpus the builtin prior is pretrained on.
    #[arg(long)]
    prior_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    prior_epochs: usize,
    #[arg(long, default_value_t = crate::scoring::DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
    #[arg(long, default_value = "route", value_parser = parse_combiner)]
    combiner: Combiner,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// A positive size or `full`.
    #[arg(long, default_value = "32", value_parser = parse_batch)]
    batch: BatchSize,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long, default_value = "per-choice", value_parser = parse_view)]
    rationale_view: RationaleView,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct RunArgs {
    #[arg(long, default_value = "aura", value_parser = parse_mode)]
    mode: Mode,
    /// Training split (the source dataset for `ood`).
    #[arg(long)]
    train: PathBuf,
    /// Evaluation split (the target dataset for `ood`).
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    train_args: TrainArgs,
    #[command(flatten)]
    #[serde(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4,0.6,0.8,1.0")]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "aura,standard", value_parser = parse_mode)]
    modes: Vec<Mode>,
    /// `id` or `ood` (the test file is then a different dataset).
    #[arg(long, default_value = "id", value_parser = parse_protocol)]
    protocol: Protocol,
    #[command(flatten)]
    #[serde(flatten)]
    train_args: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CurveArgs {
    #[arg(long, default_value = "standard", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    train_args: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    /// Run directory written by `run` or `ood`.
    #[arg(long)]
    run: PathBuf,
    /// Run directory to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_role(s: &str) -> Result<BeliefRole, String> {
    match s {
        "prior" => Ok(BeliefRole::Prior),
        "posterior" => Ok(BeliefRole::Posterior),
        _ => Err("expected prior or posterior".into()),
    }
}

fn parse_view(s: &str) -> Result<RationaleView, String> {
    match s {
        "per-choice" => Ok(RationaleView::PerChoice),
        "concatenated" => Ok(RationaleView::Concatenated),
        "blank" => Ok(RationaleView::Blank),
        _ => Err("expected per-choice, concatenated or blank".into()),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_combiner(s: &str) -> Result<Combiner, String> {
    s.parse()
}

fn parse_batch(s: &str) -> Result<BatchSize, String> {
    s.parse()
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    match s {
        "id" => Ok(Protocol::Id),
        "ood" => Ok(Protocol::Ood),
        _ => Err("expected id or ood".into()),
    }
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code.
pub fn main_with(args: Vec<String>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("AURA_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            e.code
        }
    }
}

fn dispatch(args: Vec<String>) -> Result<(), CliError> {
    let expanded = expand_config(&args)?;
    let cli = match Cli::try_parse_from(&expanded) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    Ok(())
                }
                _ => {
                    let _ = e.print();
                    Err(CliError::usage(""))
                }
            };
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let out = match &cli.command {
        Command::GenSynth(a) => &a.out,
        Command::Validate(a) => &a.out,
        Command::Score(a) => &a.out.out,
        Command::Entropy(a) => &a.out.out,
        Command::Partition(a) => &a.out.out,
        Command::Run(a) | Command::Ood(a) => &a.out.out,
        Command::Sweep(a) => &a.out,
        Command::EpochCurve(a) => &a.out,
        Command::Evaluate(a) => &a.out,
    }
    .clone();
    write_manifest(&args, &cli, &out)?;
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Validate(a) => validate(a),
        Command::Score(a) => score(a),
        Command::Entropy(a) => entropy(a),
        Command::Partition(a) => partition(a),
        Command::Run(a) => run(a, false),
        Command::Ood(a) => run(a, true),
        Command::Sweep(a) => sweep(a),
        Command::EpochCurve(a) => curve(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

/// Turns the `--config` file into flags placed right after the subcommand,
/// so flags given on the command line override them.
fn expand_config(args: &[String]) -> Result<Vec<String>, CliError> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args.to_vec());
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("--config {path}: {e}")))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("--config {path}: {e}")))?;
    let Value::Object(map) = value else {
        return Err(CliError::usage(format!(
            "--config {path}: expected a JSON object of flag names to values"
        )));
    };
    let mut extra = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            continue;
        }
        let scalar = |v: &Value| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(CliError::usage(format!(
                "--config {path}: {key} must be a string, number, boolean or list"
            ))),
        };
        match &v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => extra.push(flag),
            Value::Array(items) => {
                let parts: Result<Vec<String>, CliError> = items.iter().map(scalar).collect();
                extra.push(flag);
                extra.push(parts?.join(","));
            }
            other => {
                extra.push(flag);
                extra.push(scalar(other)?);
            }
        }
    }
    let at = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map(|i| i + 1)
        .unwrap_or(args.len());
    let mut expanded = args[..at].to_vec();
    expanded.extend(extra);
    expanded.extend_from_slice(&args[at..]);
    Ok(expanded)
}

fn input_paths(cli: &Cli) -> Vec<(String, PathBuf)> {
    let mut inputs = Vec::new();
    let mut push = |flag: &str, p: &Path| inputs.push((flag.to_string(), p.to_path_buf()));
    let train_inputs = |t: &TrainArgs, push: &mut dyn FnMut(&str, &Path)| {
        if let Some(c) = &t.prior_corpus {
            push("--prior-corpus", c);
        }
        if let Ok(spec) = t.prior_backend.parse::<BackendSpec>() {
            if let (BackendKind::File | BackendKind::Builtin, Some(loc)) = (spec.kind, &spec.location) {
                push("--prior-backend", Path::new(loc));
            }
        }
    };
    match &cli.command {
        Command::GenSynth(_) => {}
        Command::Validate(a) => a.input.iter().for_each(|p| push("--input", p)),
        Command::Score(a) => {
            push("--input", &a.input);
            if let Ok(spec) = a.backend.parse::<BackendSpec>() {
                if let (BackendKind::File | BackendKind::Builtin, Some(loc)) = (spec.kind, &spec.location) {
                    push("--backend", Path::new(loc));
                }
            }
        }
        Command::Entropy(a) => {
            push("--prior", &a.prior);
            push("--posterior", &a.posterior);
        }
        Command::Partition(a) => {
            push("--prior", &a.prior);
            push("--posterior", &a.posterior);
        }
        Command::Run(a) | Command::Ood(a) => {
            push("--train", &a.train);
            push("--test", &a.test);
            train_inputs(&a.train_args, &mut push);
        }
        Command::Sweep(a) => {
            push("--train", &a.train);
            push("--test", &a.test);
            train_inputs(&a.train_args, &mut push);
        }
        Command::EpochCurve(a) => {
            push("--train", &a.train);
            push("--validation", &a.validation);
            train_inputs(&a.train_args, &mut push);
        }
        Command::Evaluate(a) => {
            push("--run", &a.run.join(crate::data::report::REPORT_FILE));
            if let Some(b) = &a.baseline {
                push("--baseline", &b.join(crate::data::report::REPORT_FILE));
            }
        }
    }
    if let Some(c) = &cli.config {
        push("--config", c);
    }
    inputs
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(args: &[String], cli: &Cli, out: &Path) -> Result<(), CliError> {
    let mut input_digests = BTreeMap::new();
    for (flag, path) in input_paths(cli) {
        let digest = sha256_file(&path)
            .map_err(|e| CliError::usage(format!("{flag} {}: {e}", path.display())))?;
        input_digests.insert(path.display().to_string(), digest);
    }
    let subcommand = args
        .iter()
        .find(|a| SUBCOMMANDS.contains(&a.as_str()))
        .cloned()
        .unwrap_or_default();
    let manifest = RunManifest {
        command: args.to_vec(),
        subcommand,
        config: serde_json::to_value(cli).expect("options serialize"),
        input_digests,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::runtime(format!("--out {}: {e}", out.display())))?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

fn emit_lines<T: Serialize>(emit: &Option<String>, items: &[T]) -> Result<(), CliError> {
    match emit.as_deref() {
        None => Ok(()),
        Some("-") => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for item in items {
                writeln!(lock, "{}", to_json_line(item))
                    .map_err(|e| CliError::runtime(format!("stdout: {e}")))?;
            }
            Ok(())
        }
        Some(other) => Err(CliError::usage(format!(
            "--emit {other}: only `-` (standard output) is supported"
        ))),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<(), CliError> {
    let quarter = (a.n / 4).max(1);
    let splits = [
        ("train", a.n, a.rate, Split::Train, None),
        ("validation", a.n_validation.unwrap_or(quarter), a.rate, Split::Validation, None),
        ("test", a.n_test.unwrap_or(quarter), a.rate, Split::Test, None),
        ("prior", a.n_prior.unwrap_or(a.n), 0.0, Split::Train, Some(3)),
    ];
    for (name, n, rate, split, stream) in splits {
        let mut cfg = SynthConfig::new(n, a.k, rate, a.seed)
            .cue_rate(a.cue_rate)
            .split(split)
            .name(name);
        if let Some(s) = stream {
            cfg = cfg.stream(s);
        }
        let synth = generate_synthetic(&cfg)?;
        save_dataset(&a.out.join(format!("{name}.jsonl")), &synth.dataset)?;
        log::info!(
            "{name}: {} instances, corrupted fraction {:.3}",
            synth.dataset.len(),
            synth.corrupted_fraction()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ValidationReport {
    inputs: Vec<ValidationSummary>,
}

#[derive(Serialize)]
struct ValidationSummary {
    path: String,
    name: String,
    n: usize,
    /// Instance counts per number of choices.
    choice_counts: BTreeMap<usize, usize>,
}

fn validate(a: ValidateArgs) -> Result<(), CliError> {
    let mut summaries = Vec::new();
    for path in &a.input {
        let ds = load_dataset(path, Split::Train)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let mut choice_counts = BTreeMap::new();
        for inst in &ds.instances {
            *choice_counts.entry(inst.k()).or_insert(0) += 1;
        }
        summaries.push(ValidationSummary {
            path: path.display().to_string(),
            name: ds.name.clone(),
            n: ds.len(),
            choice_counts,
        });
    }
    write_json(
        &a.out.join("validation.json"),
        &ValidationReport { inputs: summaries },
    )?;
    Ok(())
}

fn backend_spec(backend: &str, url: Option<&str>, timeout_ms: u64) -> Result<BackendSpec, CliError> {
    let mut spec: BackendSpec = backend
        .parse()
        .map_err(|_| CliError::usage(format!(
            "--backend {backend}: expected file:PATH, http:URL, builtin or builtin:STATE"
        )))?;
    if spec.location.is_none() {
        spec.location = url.map(str::to_string);
    }
    if spec.kind != BackendKind::Builtin && spec.location.is_none() {
        return Err(CliError::usage(format!(
            "--backend {backend} needs a location: pass --url or {backend}:LOCATION"
        )));
    }
    spec.timeout_ms = timeout_ms;
    Ok(spec)
}

fn score(a: ScoreArgs) -> Result<(), CliError> {
    let spec = backend_spec(&a.backend, a.url.as_deref(), a.timeout_ms)?;
    let ds = load_dataset(&a.input, Split::Test)?.with_rationale_view(a.rationale_view);
    let backend = spec.open()?;
    let beliefs: Vec<BeliefDistribution> = ds
        .instances
        .par_iter()
        .map(|inst| backend.score_instance(inst, a.role))
        .collect::<Result<_, ScoringError>>()?;
    write_beliefs(&a.out.out.join("beliefs.jsonl"), &beliefs)?;
    emit_lines(&a.out.emit, &beliefs)
}

fn belief_pairs(prior: &Path, posterior: &Path) -> Result<Vec<BeliefPair>, CliError> {
    let priors = FileBackend::load(prior)?;
    let posteriors = FileBackend::load(posterior)?;
    let pairs = posteriors
        .beliefs(BeliefRole::Posterior)
        .map(|post| {
            let prior = priors.get(&post.instance_id, BeliefRole::Prior)?;
            Ok(BeliefPair::new(prior.clone(), post.clone())?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if pairs.is_empty() {
        return Err(CliError::usage(format!(
            "--posterior {}: no posterior distributions",
            posterior.display()
        )));
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct EntropyRow {
    instance_id: String,
    entropy: f64,
    prior_entropy: f64,
    posterior_entropy: f64,
}

#[derive(Serialize)]
struct EntropySummary {
    n: usize,
    mean: f64,
    min: f64,
    max: f64,
}

fn entropy(a: EntropyArgs) -> Result<(), CliError> {
    let pairs = belief_pairs(&a.prior, &a.posterior)?;
    let rows: Vec<EntropyRow> = pairs
        .iter()
        .map(|p| EntropyRow {
            instance_id: p.instance_id().to_string(),
            entropy: ambiguity::rationale_entropy(p),
            prior_entropy: ambiguity::shannon_entropy(p.prior()),
            posterior_entropy: ambiguity::shannon_entropy(p.posterior()),
        })
        .collect();
    let values: Vec<f64> = rows.iter().map(|r| r.entropy).collect();
    let summary = EntropySummary {
        n: rows.len(),
        mean: ambiguity::compute_threshold(&values)?,
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    let mut text = String::new();
    for r in &rows {
        text.push_str(&to_json_line(r));
        text.push('\n');
    }
    write_text(&a.out.out.join("entropy.jsonl"), &text)?;
    write_json(&a.out.out.join("entropy_summary.json"), &summary)?;
    write_text(
        &a.out.out.join(pipeline::HISTOGRAM_FILE),
        &histogram_csv(&values),
    )?;
    emit_lines(&a.out.emit, &rows)
}

fn histogram_csv(values: &[f64]) -> String {
    let mut csv = String::from("bin_start,count\n");
    for (start, count) in ambiguity::histogram(values, ambiguity::HISTOGRAM_BIN_WIDTH) {
        csv.push_str(&format!("{start:.2},{count}\n"));
    }
    csv
}

fn partition(a: PartitionArgs) -> Result<(), CliError> {
    if let Some(t) = a.tau {
        if !t.is_finite() {
            return Err(CliError::usage(format!("--tau {t}: expected a finite number")));
        }
    }
    let pairs = belief_pairs(&a.prior, &a.posterior)?;
    let report = ambiguity::partition(&pairs, a.tau)?;
    save_partition(&a.out.out.join(crate::data::report::PARTITION_FILE), &report)?;
    log::info!(
        "tau = {:.6}: {} ambiguous, {} unambiguous",
        report.tau,
        report.n_ambiguous,
        report.n_unambiguous
    );
    emit_lines(&a.out.emit, &report.records)
}

fn pipeline_config(t: &TrainArgs, mode: Mode, seed: u64) -> Result<PipelineConfig, CliError> {
    let mut prior_backend = backend_spec(&t.prior_backend, None, t.timeout_ms).map_err(|e| {
        CliError::usage(e.message.replace("--backend", "--prior-backend"))
    })?;
    prior_backend.timeout_ms = t.timeout_ms;
    let train = TrainConfig {
        epochs: t.epochs,
        learning_rate: t.lr,
        batch_size: t.batch,
        l2: t.l2,
        seed,
        shuffle: !t.no_shuffle,
    };
    let mut cfg = PipelineConfig::new(mode, seed);
    cfg.prior_backend = prior_backend;
    cfg.combiner = t.combiner;
    cfg.train_config_stage2 = (mode == Mode::Aura).then(|| train.clone());
    cfg.train_config_stage1 = train;
    cfg.rationale_view = t.rationale_view;
    cfg.dim = t.dim;
    cfg.hash_seed = t.hash_seed;
    cfg.validate()?;
    Ok(cfg)
}

fn prior_for(cfg: &PipelineConfig, t: &TrainArgs) -> Result<crate::scoring::Backend, CliError> {
    let corpus = match &t.prior_corpus {
        Some(p) => Some(load_dataset(p, Split::Train)?),
        None => None,
    };
    if corpus.is_some() && (cfg.prior_backend.kind != BackendKind::Builtin || cfg.prior_backend.location.is_some()) {
        return Err(CliError::usage(
            "--prior-corpus only applies to a bare --prior-backend builtin",
        ));
    }
    let prior_train = TrainConfig {
        epochs: t.prior_epochs,
        ..TrainConfig::default()
    };
    Ok(resolve_prior(cfg, corpus.as_ref(), &prior_train)?)
}

fn summarize(outcome: &RunOutcome) {
    eprintln!(
        "{} on {} ({}): accuracy {:.4} over {} instances",
        outcome.report.run_id,
        outcome.report.dataset_name,
        outcome.report.protocol,
        outcome.report.accuracy,
        outcome.report.n
    );
}

fn run(a: RunArgs, ood: bool) -> Result<(), CliError> {
    let cfg = pipeline_config(&a.train_args, a.mode, a.seed)?;
    let train = load_dataset(&a.train, Split::Train)?;
    let test = load_dataset(&a.test, Split::Test)?;
    let prior = prior_for(&cfg, &a.train_args)?;
    let outcome = if ood {
        evaluation::run_ood(&train, &test, &cfg, &prior)?
    } else {
        pipeline::run(&train, &test, &cfg, &prior)?
    };
    outcome.persist(&a.out.out)?;
    summarize(&outcome);
    emit_lines(&a.out.emit, &outcome.routing)
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let base_mode = a.modes.first().copied().unwrap_or(Mode::Aura);
    let cfg = pipeline_config(&a.train_args, base_mode, a.seeds.first().copied().unwrap_or(1))?;
    let train = load_dataset(&a.train, Split::Train)?;
    let test = load_dataset(&a.test, Split::Test)?;
    let prior = prior_for(&cfg, &a.train_args)?;
    let spec = SweepSpec {
        ratios: a.ratios.clone(),
        seeds: a.seeds.clone(),
        protocol: a.protocol,
    };
    let cells_dir = a.out.join("cells");
    let result = ratio_sweep_with(&train, &test, &spec, &cfg, &a.modes, &prior, |cell, outcome| {
        let dir = cells_dir.join(&cell.report.run_id);
        save_routing(&dir.join(crate::data::report::ROUTING_FILE), &outcome.routing)?;
        write_json(&dir.join(crate::data::report::REPORT_FILE), &cell.report)?;
        Ok(())
    })?;
    write_text(&a.out.join("sweep_cells.csv"), &result.cells_csv())?;
    write_text(&a.out.join("sweep_summary.csv"), &result.summary_csv())?;
    for s in &result.summary {
        eprintln!(
            "ratio {} {}: mean {:.4} sd {:.4} over {} seeds",
            s.ratio, s.mode, s.mean_accuracy, s.std_accuracy, s.n_seeds
        );
    }
    Ok(())
}

fn curve(a: CurveArgs) -> Result<(), CliError> {
    if a.mode == Mode::Aura {
        return Err(CliError::usage(
            "--mode aura: epoch curves use single-stage training; pass standard or no-rationales",
        ));
    }
    let cfg = pipeline_config(&a.train_args, a.mode, a.seed)?;
    let train = load_dataset(&a.train, Split::Train)?;
    let validation = load_dataset(&a.validation, Split::Validation)?;
    let prior = prior_for(&cfg, &a.train_args)?;
    let rows = epoch_curve(&train, &validation, &cfg, a.train_args.epochs, &prior)?;
    write_text(&a.out.join("epoch_curve.csv"), &curve_csv(&rows))?;
    if let Some(last) = rows.last() {
        eprintln!(
            "epoch {}: train {:.4} validation {:.4}",
            last.epoch, last.train_acc, last.val_acc
        );
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let stored = load_artifacts(&a.run)?;
    let dataset = Dataset {
        name: stored.report.dataset_name.clone(),
        split: stored.report.split,
        instances: Vec::new(),
    };
    let mut report = report_from_routing(
        &stored.report.run_id,
        &dataset,
        &stored.report.protocol,
        &stored.routing,
    )?;
    if report.accuracy != stored.report.accuracy {
        return Err(CliError::usage(format!(
            "{}: stored accuracy {} but routing decisions give {}",
            a.run.display(),
            stored.report.accuracy,
            report.accuracy
        )));
    }
    if let Some(b) = &a.baseline {
        let baseline = load_artifacts(b)?;
        report.comparisons.push(compare(&report, &baseline.report));
    }
    write_json(&a.out.join("evaluation.json"), &report)?;
    eprintln!("{}: accuracy {:.4}", report.run_id, report.accuracy);
    for c in &report.comparisons {
        eprintln!("  vs {}: {:+.2} points", c.baseline_run_id, c.delta_accuracy);
    }
    Ok(())
}
