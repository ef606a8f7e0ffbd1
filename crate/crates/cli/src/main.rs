//! `otcil` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure, 4 artifact mismatch (checkpoint, bundle or schedule do not fit
//! together).

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otcil::checkpoint;
use otcil::corpus::{
    generate_synthetic, load_bundle, split_tasks, write_atomic, write_bundle, EmbeddingBundle, SyntheticSpec,
};
use otcil::evaluator::{aggregate, build_report, read_report, write_reports, InferenceConfig, Mode, Predictor};
use otcil::pipeline::{run, RunOptions};
use otcil::semantics::{build_visual_sample_sets, emit_attribute_manifest, DEFAULT_DIVERSE_SAMPLES};
use otcil::trainer::TrainerConfig;
use otcil::EngineState;
use serde::Serialize;

use crate::config::{RunConfig, CONFIG_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAINING_LOG_FILE: &str = "training_log.jsonl";
pub const DEBUG_FILE: &str = "debug.jsonl";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const AGGREGATE_CURVES_CSV: &str = "curves.csv";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Artifact(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Artifact(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Artifact(m) => write!(f, "artifact mismatch: {m}"),
        }
    }
}

impl From<otcil::Error> for CliError {
    fn from(e: otcil::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if e.is_artifact_mismatch() || matches!(e, otcil::Error::Format { .. } | otcil::Error::InvalidBundle(_))
        {
            CliError::Artifact(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "otcil",
    version,
    about = "Exemplar-free class-incremental learning on token embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic embedding bundle.
    Synth(SynthArgs),
    /// Write attribute_requests.json for an external attribute extractor.
    Manifest(ManifestArgs),
    /// Train all sessions of a schedule and evaluate every stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally over several fusion weights.
    Eval(EvalArgs),
    /// Aggregate report.json files (mean and std per mode).
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Embedding dimension.
    #[arg(long = "d", default_value_t = 16)]
    dim: usize,
    /// Patches per image.
    #[arg(long = "M", default_value_t = 16)]
    patches: usize,
    #[arg(long, default_value_t = 5)]
    attributes: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 1993)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ManifestArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Diverse samples per class besides the representative one.
    #[arg(long, default_value_t = DEFAULT_DIVERSE_SAMPLES)]
    n_diverse: usize,
    /// Seed of the train/test split the samples are drawn from.
    #[arg(long, default_value_t = 1993)]
    seed: u64,
    #[arg(long, default_value = "attribute_requests.json")]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Classes in the first session (0: same as --increment).
    #[arg(long)]
    base_size: Option<usize>,
    #[arg(long)]
    increment: Option<usize>,
    /// Selected patches per class.
    #[arg(long)]
    k: Option<usize>,
    /// Attributes per class.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_diverse: Option<usize>,
    #[arg(long)]
    no_replay: bool,
    #[arg(long)]
    diagonal_covariance: bool,
    #[arg(long)]
    resample_attributes: bool,
}

impl Overrides {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(b) = &self.bundle {
            cfg.bundle = Some(b.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(v) = self.base_size {
            cfg.base_size = v;
        }
        if let Some(v) = self.increment {
            cfg.increment = v;
        }
        let t = &mut cfg.trainer;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.beta {
            t.beta = v;
        }
        if let Some(v) = self.k {
            t.k = v;
        }
        if let Some(v) = self.n {
            t.n = v;
        }
        if let Some(v) = self.n_diverse {
            t.n_diverse = v;
        }
        t.replay &= !self.no_replay;
        t.diagonal_covariance |= self.diagonal_covariance;
        t.resample_attributes |= self.resample_attributes;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Prediction mode; defaults to the mode the checkpoint was trained with.
    #[arg(long)]
    mode: Option<Mode>,
    /// Fusion weight; repeat for a sweep (one subdirectory per value).
    #[arg(long)]
    beta: Vec<f64>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Write per-image alignment records for the final stage.
    #[arg(long)]
    debug_dump: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// report.json files, or directories containing one.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "summary")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Manifest(a) => cmd_manifest(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var("OTCIL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(format!("OTCIL_THREADS must be a positive integer, got {value:?}")))?;
    otcil::limit_threads(threads)?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> CliResult {
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        dim: a.dim,
        patches: a.patches,
        attributes_per_class: a.attributes,
        noise_scale: a.noise,
    };
    let bundle = generate_synthetic(&spec, a.seed)?;
    write_bundle(&bundle, &a.out)?;
    eprintln!(
        "wrote {} samples of {} classes to {}",
        bundle.samples().len(),
        bundle.classes().len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_manifest(a: ManifestArgs) -> CliResult {
    let bundle = load_bundle(&a.bundle)?;
    let (train, _) = bundle.train_test_split(a.seed);
    let sets = build_visual_sample_sets(&bundle, &train, &bundle.class_ids(), a.n_diverse)?;
    emit_attribute_manifest(&sets, &bundle, &a.out)?;
    eprintln!("wrote {} attribute requests to {}", sets.len(), a.out.display());
    Ok(())
}

fn metadata(opts: &RunOptions) -> CliResult<Vec<u8>> {
    serde_json::to_vec(opts).map_err(|e| CliError::Config(e.to_string()))
}

fn read_metadata(bytes: &[u8], path: &Path) -> CliResult<RunOptions> {
    serde_json::from_slice(bytes)
        .map_err(|e| CliError::Artifact(format!("{}: unreadable run options: {e}", path.display())))
}

fn session_checkpoint(out: &Path, session: usize) -> PathBuf {
    out.join("checkpoints").join(format!("session_{session}.bin"))
}

fn session_log(out: &Path, session: usize) -> PathBuf {
    out.join("logs").join(format!("session_{session}.jsonl"))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = a.overrides.resolve()?;
    if a.resume.is_some() {
        cfg.resume = a.resume.clone();
    }
    let bundle = load_bundle(cfg.bundle()?)?;
    let opts = cfg.options();
    let resume = match &cfg.resume {
        Some(path) => {
            let (state, meta) = checkpoint::load(path)?;
            if read_metadata(&meta, path)? != opts {
                return Err(CliError::Artifact(format!(
                    "{} was written with different run options",
                    path.display()
                )));
            }
            Some(state)
        }
        None => None,
    };
    let out = cfg.out.clone();
    create_dir(&out.join("checkpoints"))?;
    create_dir(&out.join("logs"))?;
    write_config(&out, &cfg)?;
    let meta = metadata(&opts)?;

    let mut last_checkpoint: Option<PathBuf> = cfg.resume.clone();
    let result = run(&bundle, &opts, resume, |state, log| {
        let path = session_checkpoint(&out, log.session);
        checkpoint::save(&path, state, &meta)?;
        write_atomic(&session_log(&out, log.session), log.to_jsonl()?.as_bytes())?;
        let mean = log
            .records
            .last()
            .and_then(|r| log.epoch_mean_loss(r.epoch))
            .unwrap_or(f64::NAN);
        eprintln!(
            "session {}: {} steps, final epoch loss {mean:.4}",
            log.session,
            log.records.len()
        );
        last_checkpoint = Some(path);
        Ok(())
    });
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            let err = CliError::from(e);
            if let (CliError::Numerical(_), Some(path)) = (&err, &last_checkpoint) {
                eprintln!("resume with --resume {}", path.display());
            }
            return Err(err);
        }
    };

    checkpoint::save(out.join(CHECKPOINT_FILE), &result.state, &meta)?;
    let mut log = String::new();
    for session in 1..=result.state.sessions_trained() {
        if let Ok(text) = fs::read_to_string(session_log(&out, session)) {
            log.push_str(&text);
        }
    }
    write_text(&out.join(TRAINING_LOG_FILE), &log)?;
    write_reports(&out, &result.report, &result.matrix)?;
    print_report(&result.report);
    Ok(())
}

fn print_report(report: &otcil::evaluator::SessionReport) {
    let curve: Vec<String> = report.per_session_accuracy.iter().map(|a| format!("{a:.2}")).collect();
    let forgetting = report
        .forgetting
        .map(|f| format!("{f:.2}"))
        .unwrap_or_else(|| "-".into());
    println!(
        "{}: average {:.2}, last {:.2}, forgetting {forgetting}; per session [{}]",
        report.mode,
        report.average,
        report.last,
        curve.join(", ")
    );
}

/// The sessions a checkpoint can be evaluated on under `opts`.
fn evaluation_sessions(state: &EngineState, bundle: &EmbeddingBundle, opts: &RunOptions) -> CliResult<Vec<Vec<u32>>> {
    if state.dim() != bundle.dim() {
        return Err(CliError::Artifact(format!(
            "checkpoint has d={}, bundle has d={}",
            state.dim(),
            bundle.dim()
        )));
    }
    let schedule = split_tasks(&bundle.class_ids(), opts.base_size, opts.increment, opts.trainer.seed)?;
    if opts.mode == Mode::ZeroShot {
        return Ok(schedule.sessions);
    }
    let trained = state.sessions_trained();
    if trained == 0 {
        return Err(CliError::Artifact("checkpoint has no trained sessions".into()));
    }
    if trained > schedule.len() || state.sessions() != &schedule.sessions[..trained] {
        return Err(CliError::Artifact(
            "checkpoint sessions do not match the bundle's schedule".into(),
        ));
    }
    Ok(schedule.sessions[..trained].to_vec())
}

#[derive(Serialize)]
struct DebugRecord<'a> {
    image_id: &'a str,
    label: u32,
    prediction: otcil::evaluator::Prediction,
    alignments: Vec<otcil::alignment::ClassAlignment>,
}

fn debug_dump(
    state: &EngineState,
    bundle: &EmbeddingBundle,
    sessions: &[Vec<u32>],
    test: &[usize],
    mode: Mode,
    inference: &InferenceConfig,
    path: &Path,
) -> CliResult {
    let seen: Vec<u32> = sessions.iter().flatten().copied().collect();
    let predictor = Predictor::new(state, bundle, &seen, mode, inference)?;
    let mut out = String::new();
    for &i in test {
        let image = &bundle.samples()[i];
        if !seen.contains(&image.label) {
            continue;
        }
        let record = DebugRecord {
            image_id: &image.image_id,
            label: image.label,
            prediction: predictor.predict(image)?,
            alignments: predictor.explain(image)?,
        };
        out.push_str(&serde_json::to_string(&record).map_err(|e| CliError::Config(e.to_string()))?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (state, meta) = checkpoint::load(&a.checkpoint)?;
    let mut opts = read_metadata(&meta, &a.checkpoint)?;
    let bundle = load_bundle(&a.bundle)?;
    if let Some(m) = a.mode {
        opts.mode = m;
    }
    let sessions = evaluation_sessions(&state, &bundle, &opts)?;
    let (_, test) = bundle.train_test_split(opts.trainer.seed);
    let trainer = opts.mode.training_config(&opts.trainer);
    let betas = if a.beta.is_empty() {
        vec![trainer.beta]
    } else {
        a.beta.clone()
    };
    for &beta in &betas {
        let dir = if betas.len() > 1 {
            a.out.join(format!("beta_{beta}"))
        } else {
            a.out.clone()
        };
        let mut cfg = RunConfig {
            bundle: Some(a.bundle.clone()),
            out: dir.clone(),
            resume: Some(a.checkpoint.clone()),
            debug_dump: a.debug_dump,
            ..RunConfig::default()
        };
        cfg.apply_options(RunOptions {
            trainer: TrainerConfig {
                beta,
                ..trainer.clone()
            },
            ..opts.clone()
        });
        cfg.validate()?;
        let inference = InferenceConfig::from(&cfg.trainer);
        let (report, matrix) = build_report(&state, &sessions, &bundle, &test, opts.mode, &inference)?;
        create_dir(&dir)?;
        write_config(&dir, &cfg)?;
        write_reports(&dir, &report, &matrix)?;
        if a.debug_dump {
            debug_dump(
                &state,
                &bundle,
                &sessions,
                &test,
                opts.mode,
                &inference,
                &dir.join(DEBUG_FILE),
            )?;
        }
        print_report(&report);
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportInputs {
    inputs: Vec<PathBuf>,
}

fn cmd_report(a: ReportArgs) -> CliResult {
    let mut groups: BTreeMap<(String, String), Vec<otcil::evaluator::SessionReport>> = BTreeMap::new();
    let mut inputs = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() {
            input.join(otcil::evaluator::REPORT_JSON)
        } else {
            input.clone()
        };
        let (report, _) = read_report(&path)?;
        groups
            .entry((report.mode.name().to_string(), report.beta.to_string()))
            .or_default()
            .push(report);
        inputs.push(path);
    }
    let mut aggregates = Vec::new();
    let mut csv =
        String::from("mode,beta,runs,average_mean,average_std,last_mean,last_std,forgetting_mean,forgetting_std\n");
    let mut curves = String::from("mode,beta,session,accuracy\n");
    for ((mode, beta), reports) in &groups {
        let agg = aggregate(reports)?;
        let (fm, fs) = agg
            .forgetting
            .map(|f| (format!("{:.2}", f.mean), format!("{:.2}", f.std)))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{mode},{beta},{},{:.2},{:.2},{:.2},{:.2},{fm},{fs}\n",
            agg.runs, agg.average.mean, agg.average.std, agg.last.mean, agg.last.std
        ));
        for (b, acc) in agg.curve.iter().enumerate() {
            curves.push_str(&format!("{mode},{beta},{},{acc:.2}\n", b + 1));
        }
        println!(
            "{mode} (beta {beta}, {} runs): average {:.2} ± {:.2}, last {:.2} ± {:.2}",
            agg.runs, agg.average.mean, agg.average.std, agg.last.mean, agg.last.std
        );
        aggregates.push(agg);
    }
    create_dir(&a.out)?;
    let json = serde_json::to_string_pretty(&aggregates).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&a.out.join(AGGREGATE_JSON), &(json + "\n"))?;
    write_text(&a.out.join(AGGREGATE_CSV), &csv)?;
    write_text(&a.out.join(AGGREGATE_CURVES_CSV), &curves)?;
    let provenance = toml::to_string(&ReportInputs { inputs }).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&a.out.join(CONFIG_FILE), &provenance)
}
