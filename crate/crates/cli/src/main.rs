//! `memeshield`: detection, correction, evaluation and expert review.
//!
//! Exit status is 0 on success, 1 when a run finished but is degraded and 2
//! on fatal errors.

mod eval;
mod review;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use memeshield_core::correction::CorrectionStatus;
use memeshield_core::dataset::{load_split, resolve_image, SplitName};
use memeshield_core::detection::request_digests;
use memeshield_core::gateway::{BackendKind, FixtureStore, HttpGateway, InferenceConfig, ReplayGateway, VisionGateway};
use memeshield_core::pipeline::{self, run_correction, run_detection, RunConfig, Selection, DEGRADED_FAILURE_RATE};
use memeshield_core::prompt::PromptTier;
use memeshield_core::verdict::TieBreak;

#[derive(Parser)]
#[command(name = "memeshield", version, about = "Zero-shot hateful meme detection and correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every meme of a split with k-trial majority voting.
    Detect(DetectArgs),
    /// Rewrite the text of hateful memes and re-verify the result.
    Correct(CorrectArgs),
    /// Build an evaluation report from a results.jsonl file.
    Eval(eval::EvalArgs),
    /// Run or drive the expert review service.
    Review {
        #[command(subcommand)]
        command: review::ReviewCommand,
    },
    /// Record or check replay fixtures.
    Fixtures {
        #[command(subcommand)]
        command: FixturesCommand,
    },
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Dataset root holding the split JSONL files and `img/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test_seen")]
    split: SplitName,
    /// naive, detailed or complete.
    #[arg(long, default_value = "complete")]
    tier: PromptTier,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Inject the meme's OCR text into the prompt.
    #[arg(long)]
    ocr: bool,
    /// Outcome of an exact tie among valid trials: hateful or non_hateful.
    #[arg(long, default_value = "hateful")]
    tie_break: TieBreak,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    /// Retries for transient HTTP failures.
    #[arg(long)]
    retries: Option<u32>,
}

impl ExperimentArgs {
    fn inference(&self) -> InferenceConfig {
        let d = InferenceConfig::default();
        InferenceConfig {
            temperature: self.temperature.unwrap_or(d.temperature),
            top_p: self.top_p.unwrap_or(d.top_p),
            max_output_tokens: self.max_tokens.unwrap_or(d.max_output_tokens),
            model_id: self.model.clone().unwrap_or(d.model_id),
            timeout_secs: self.timeout.unwrap_or(d.timeout_secs),
            retries: self.retries.unwrap_or(d.retries),
        }
    }
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// http or replay.
    #[arg(long, default_value = "http")]
    backend: BackendKind,
    /// Server base URL; falls back to MEMESHIELD_ENDPOINT.
    #[arg(long)]
    endpoint: Option<String>,
    /// Fixture directory: read by the replay backend, recorded into by http.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Output directory for results, reports and the run manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct CorrectArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Number of hateful memes to correct.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Rewrite attempts per meme.
    #[arg(long, default_value_t = 3)]
    budget: u32,
    /// first_n or seeded_random.
    #[arg(long, default_value = "first_n")]
    select: Selection,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum FixturesCommand {
    /// Run detection against a live endpoint, storing every exchange.
    Record {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a fixture directory answers every request of a detection run.
    Verify {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        fixtures: PathBuf,
    },
}

fn run_config(exp: &ExperimentArgs, backend: &BackendArgs) -> RunConfig {
    let mut config = RunConfig::new(&exp.data, exp.split, &backend.out);
    config.tier = exp.tier;
    config.trials_k = exp.trials;
    config.use_ocr = exp.ocr;
    config.tie_break = exp.tie_break;
    config.inference = exp.inference();
    config.backend = backend.backend;
    config.parallelism = backend.parallelism;
    if backend.backend == BackendKind::Http {
        config.timestamp = Some(chrono::Utc::now().to_rfc3339());
    }
    config
}

fn gateway(config: &RunConfig, backend: &BackendArgs) -> Result<Arc<dyn VisionGateway>> {
    match backend.backend {
        BackendKind::Replay => {
            let dir = backend.fixtures.as_ref().context("--backend replay needs --fixtures <dir>")?;
            if !dir.is_dir() {
                bail!("fixture directory {} does not exist", dir.display());
            }
            Ok(Arc::new(ReplayGateway::new(FixtureStore::new(dir))))
        }
        BackendKind::Http => {
            let timeout = Duration::from_secs(config.inference.timeout_secs);
            let mut gw = HttpGateway::from_env(backend.endpoint.clone(), timeout)?;
            if let Some(dir) = &backend.fixtures {
                gw = gw.recording_into(FixtureStore::new(dir));
            }
            Ok(Arc::new(gw))
        }
    }
}

fn detect(exp: &ExperimentArgs, backend: &BackendArgs) -> Result<ExitCode> {
    let config = run_config(exp, backend);
    let run = run_detection(&config, gateway(&config, backend)?)?;
    let m = &run.manifest;
    println!(
        "{}: {} of {} memes scored ({} resumed, {} failed)",
        config.split, m.completed, m.total, m.resumed, m.failures.len()
    );
    match &run.report {
        Some(r) => println!(
            "accuracy {:.4}  auroc {}  -> {}",
            r.accuracy,
            r.auroc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
            config.output_dir.join(pipeline::REPORT_JSON).display()
        ),
        None => println!(
            "split is not fully labeled; predictions in {}",
            config.output_dir.join(pipeline::PREDICTIONS_CSV).display()
        ),
    }
    if run.degraded() {
        eprintln!("run degraded: {} failures exceed {:.0}%", m.failures.len(), DEGRADED_FAILURE_RATE * 100.0);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn correct(args: &CorrectArgs) -> Result<ExitCode> {
    let mut config = run_config(&args.experiment, &args.backend);
    config.seed = args.seed;
    let candidates = run_correction(&config, gateway(&config, &args.backend)?, args.select, args.n, args.budget)?;
    let count = |s| candidates.iter().filter(|c| c.status == s).count();
    let failed = count(CorrectionStatus::GenerationFailed);
    println!(
        "{} candidates: {} verified non-hateful, {} failed verification, {} failed generation -> {}",
        candidates.len(),
        count(CorrectionStatus::VerifiedNonhateful),
        count(CorrectionStatus::VerificationFailed),
        failed,
        config.output_dir.join(pipeline::CORRECTIONS_FILE).display()
    );
    if !candidates.is_empty() && failed as f64 / candidates.len() as f64 > DEGRADED_FAILURE_RATE {
        eprintln!("run degraded: {failed} generation failures");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_fixtures(exp: &ExperimentArgs, dir: &std::path::Path) -> Result<ExitCode> {
    let store = FixtureStore::new(dir);
    let split = load_split(&exp.data, exp.split)?;
    let settings = RunConfig {
        tier: exp.tier,
        trials_k: exp.trials,
        use_ocr: exp.ocr,
        tie_break: exp.tie_break,
        inference: exp.inference(),
        ..RunConfig::new(&exp.data, exp.split, dir)
    }
    .detection_settings();
    let (mut needed, mut missing) = (0, Vec::new());
    for record in &split.records {
        let image = resolve_image(record, &exp.data)?;
        for (trial, digest) in request_digests(&settings, &image, &record.text)?.into_iter().enumerate() {
            needed += 1;
            if !store.contains(&digest) {
                missing.push(format!("{} trial {trial}: {digest}", record.id));
            }
        }
    }
    println!("{} of {needed} requests covered by {}", needed - missing.len(), dir.display());
    for m in &missing {
        println!("missing {m}");
    }
    Ok(if missing.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Detect(args) => detect(&args.experiment, &args.backend),
        Command::Correct(args) => correct(&args),
        Command::Eval(args) => eval::run(&args),
        Command::Review { command } => review::run(command),
        Command::Fixtures { command } => match command {
            FixturesCommand::Record { experiment, endpoint, fixtures, parallelism, out } => {
                std::fs::create_dir_all(&fixtures).with_context(|| format!("creating {}", fixtures.display()))?;
                let backend = BackendArgs {
                    backend: BackendKind::Http,
                    endpoint,
                    fixtures: Some(fixtures),
                    parallelism,
                    out,
                };
                detect(&experiment, &backend)
            }
            FixturesCommand::Verify { experiment, fixtures } => verify_fixtures(&experiment, &fixtures),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
