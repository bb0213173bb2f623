//! End-to-end runs: detection over a split with resumable JSONL output, and
//! correction over a selection of hateful memes.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{CorrectionCandidate, Corrector};
use crate::dataset::{self, filter_hateful, load_split, DatasetError, MemeRecord, SplitName};
use crate::detection::Detector;
use crate::gateway::{BackendKind, InferenceConfig, VisionGateway};
use crate::metrics::{EvalReport, MetricsError, PerMemeRow, RunMeta};
use crate::prompt::{correction_template_hash, detection_template_hash, PromptTier, TEMPLATE_VERSION};
use crate::verdict::{DetectionResult, DetectionSettings, TieBreak};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORRECTIONS_FILE: &str = "corrections.jsonl";

/// Failure fraction above which a run is marked degraded.
pub const DEGRADED_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("existing results in {path} were produced with different settings for meme {meme_id:?}")]
    ResumeMismatch { path: PathBuf, meme_id: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub split: SplitName,
    pub tier: PromptTier,
    pub trials_k: usize,
    pub use_ocr: bool,
    #[serde(default)]
    pub tie_break: TieBreak,
    pub inference: InferenceConfig,
    pub backend: BackendKind,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Run timestamp stamped into reports; left empty for replay runs.
    pub timestamp: Option<String>,
}

impl RunConfig {
    pub fn new(data_root: impl Into<PathBuf>, split: SplitName, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            split,
            tier: PromptTier::Complete,
            trials_k: 5,
            use_ocr: false,
            tie_break: TieBreak::Hateful,
            inference: InferenceConfig::default(),
            backend: BackendKind::Replay,
            parallelism: 1,
            output_dir: output_dir.into(),
            seed: 0,
            timestamp: None,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.trials_k == 0 {
            return Err(PipelineError::InvalidConfig("trials_k must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::InvalidConfig("parallelism must be >= 1".into()));
        }
        self.inference
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }

    pub fn detection_settings(&self) -> DetectionSettings {
        DetectionSettings {
            tier: self.tier,
            k: self.trials_k,
            use_ocr: self.use_ocr,
            tie_break: self.tie_break,
            inference: self.inference.clone(),
        }
    }

    pub fn run_meta(&self) -> RunMeta {
        RunMeta {
            tier: self.tier,
            k: self.trials_k,
            use_ocr: self.use_ocr,
            model_id: self.inference.model_id.clone(),
            prompt_hash: detection_template_hash(self.tier, self.use_ocr),
            timestamp: self.timestamp.clone(),
        }
    }
}

/// One line of `results.jsonl`: the detection plus the gold label, if known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMeme {
    #[serde(flatten)]
    pub result: DetectionResult,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeFailure {
    pub meme_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub template_version: String,
    pub config: RunConfig,
    pub prompt_hashes: Vec<String>,
    pub model_id: String,
    pub total: usize,
    pub completed: usize,
    pub resumed: usize,
    pub failures: Vec<MemeFailure>,
    pub degraded: bool,
    pub fixture_digests: Vec<String>,
}

#[derive(Debug)]
pub struct DetectionRun {
    pub results: Vec<ScoredMeme>,
    pub report: Option<EvalReport>,
    pub manifest: RunManifest,
}

impl DetectionRun {
    pub fn degraded(&self) -> bool {
        self.manifest.degraded
    }
}

/// Runs `work` over `items` with `parallelism` threads; `sink` sees every
/// (index, output) on the calling thread, in completion order.
pub fn run_pool<T, R, W, S>(items: &[T], parallelism: usize, work: W, mut sink: S)
where
    T: Sync,
    R: Send,
    W: Fn(&T) -> R + Sync,
    S: FnMut(usize, R),
{
    let next = AtomicUsize::new(0);
    let workers = parallelism.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, work(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            sink(i, r);
        }
    });
}

/// Reads completed results, discarding a torn trailing line from an
/// interrupted run.
pub fn read_results(path: &Path) -> Result<Vec<ScoredMeme>, PipelineError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut out = Vec::new();
    let count = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScoredMeme>(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == count => {
                log::warn!("{}: dropping torn final line: {e}", path.display());
                rewrite_results(path, &out)?;
            }
            Err(e) => {
                return Err(PipelineError::Io {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn rewrite_results(path: &Path, results: &[ScoredMeme]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for r in results {
        serde_json::to_writer(&mut buf, r).expect("result serializes");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn run_detection(config: &RunConfig, gateway: Arc<dyn VisionGateway>) -> Result<DetectionRun, PipelineError> {
    config.validate()?;
    let split = load_split(&config.data_root, config.split)?;
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let results_path = config.output_dir.join(RESULTS_FILE);

    let settings = config.detection_settings();
    let mut results = read_results(&results_path)?;
    let known: HashSet<&str> = split.records.iter().map(|r| r.id.as_str()).collect();
    results.retain(|r| known.contains(r.result.meme_id.as_str()));
    if let Some(stale) = results.iter().find(|r| r.result.config_snapshot != settings) {
        return Err(PipelineError::ResumeMismatch {
            path: results_path,
            meme_id: stale.result.meme_id.clone(),
        });
    }
    let done: HashSet<String> = results.iter().map(|r| r.result.meme_id.clone()).collect();
    let resumed = done.len();
    let pending: Vec<&MemeRecord> = split.records.iter().filter(|r| !done.contains(&r.id)).collect();
    if resumed > 0 {
        log::info!("resuming: {resumed} memes already scored, {} pending", pending.len());
    }

    let detector = Detector::new(gateway, settings);
    let mut sink = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results_path)
        .map_err(io_err(&results_path))?;
    let mut failures = Vec::new();
    let mut write_error = None;

    run_pool(
        &pending,
        config.parallelism,
        |record| {
            let image = dataset::resolve_image(record, &config.data_root).map_err(|e| e.to_string())?;
            detector
                .detect(&record.id, &image, &record.text)
                .map_err(|e| e.to_string())
        },
        |i, outcome| match outcome {
            Ok(result) => {
                let scored = ScoredMeme { result, label: pending[i].label };
                let mut line = serde_json::to_vec(&scored).expect("result serializes");
                line.push(b'\n');
                if let Err(e) = sink.write_all(&line).and_then(|_| sink.flush()) {
                    write_error.get_or_insert(e);
                }
                results.push(scored);
            }
            Err(error) => {
                log::warn!("meme {} failed: {error}", pending[i].id);
                failures.push(MemeFailure { meme_id: pending[i].id.clone(), error });
            }
        },
    );
    if let Some(e) = write_error {
        return Err(io_err(&results_path)(e));
    }

    results.sort_by(|a, b| a.result.meme_id.cmp(&b.result.meme_id));
    failures.sort_by(|a, b| a.meme_id.cmp(&b.meme_id));
    let total = split.len();
    let degraded = total > 0 && failures.len() as f64 / total as f64 > DEGRADED_FAILURE_RATE;

    let report = if !results.is_empty() && results.iter().all(|r| r.label.is_some()) {
        let rows = results
            .iter()
            .map(|r| PerMemeRow {
                id: r.result.meme_id.clone(),
                label: r.label.expect("checked above"),
                pred: r.result.predicted_label,
                score: r.result.score,
            })
            .collect();
        let report = EvalReport::from_rows(config.split, rows, config.run_meta())?;
        let json_path = config.output_dir.join(REPORT_JSON);
        write_atomic(&json_path, report.to_json().as_bytes())?;
        write_atomic(&config.output_dir.join(REPORT_CSV), report.to_csv().as_bytes())?;
        Some(report)
    } else {
        let mut csv = String::from("id,pred,score\n");
        for r in &results {
            csv.push_str(&format!("{},{},{}\n", r.result.meme_id, r.result.predicted_label, r.result.score));
        }
        write_atomic(&config.output_dir.join(PREDICTIONS_CSV), csv.as_bytes())?;
        None
    };

    let fixture_digests: BTreeSet<String> = results
        .iter()
        .flat_map(|r| r.result.trials.iter().map(|t| t.exchange.request_digest.to_string()))
        .collect();
    let manifest = RunManifest {
        template_version: TEMPLATE_VERSION.to_string(),
        config: config.clone(),
        prompt_hashes: vec![detection_template_hash(config.tier, config.use_ocr)],
        model_id: config.inference.model_id.clone(),
        total,
        completed: results.len(),
        resumed,
        failures,
        degraded,
        fixture_digests: fixture_digests.into_iter().collect(),
    };
    write_manifest(&config.output_dir, &manifest)?;
    Ok(DetectionRun { results, report, manifest })
}

fn write_manifest<M: Serialize>(dir: &Path, manifest: &M) -> Result<(), PipelineError> {
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    FirstN,
    SeededRandom,
}

impl std::str::FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first_n" => Ok(Selection::FirstN),
            "seeded_random" => Ok(Selection::SeededRandom),
            other => Err(format!("unknown selection policy {other:?}")),
        }
    }
}

/// Picks `n` memes; random picks are returned in dataset order.
pub fn select_memes(hateful: &[MemeRecord], selection: Selection, n: usize, seed: u64) -> Vec<MemeRecord> {
    if n > hateful.len() {
        log::warn!("requested {n} memes but only {} are hateful; clipping", hateful.len());
    }
    let n = n.min(hateful.len());
    match selection {
        Selection::FirstN => hateful[..n].to_vec(),
        Selection::SeededRandom => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = (0..hateful.len()).collect::<Vec<_>>()
                .choose_multiple(&mut rng, n)
                .copied()
                .collect();
            picked.sort_unstable();
            picked.into_iter().map(|i| hateful[i].clone()).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionManifest {
    pub template_version: String,
    pub config: RunConfig,
    pub selection: Selection,
    pub requested: usize,
    pub selected: Vec<String>,
    pub budget: u32,
    pub prompt_hashes: Vec<String>,
}

pub fn run_correction(
    config: &RunConfig,
    gateway: Arc<dyn VisionGateway>,
    selection: Selection,
    n: usize,
    budget: u32,
) -> Result<Vec<CorrectionCandidate>, PipelineError> {
    config.validate()?;
    if budget == 0 {
        return Err(PipelineError::InvalidConfig("budget must be >= 1".into()));
    }
    let split = load_split(&config.data_root, config.split)?;
    let hateful = filter_hateful(&split)?;
    if n == 0 {
        log::warn!("n = 0: nothing to correct");
    }
    let chosen = select_memes(&hateful, selection, n, config.seed);
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;

    let corrector = Corrector::new(gateway, config.inference.clone(), config.trials_k, config.tie_break);
    let mut slots: Vec<Option<CorrectionCandidate>> = vec![None; chosen.len()];
    let mut image_errors = Vec::new();
    run_pool(
        &chosen,
        config.parallelism,
        |record| {
            let image = dataset::resolve_image(record, &config.data_root)?;
            Ok::<_, DatasetError>(corrector.correct_meme(record, &image, budget))
        },
        |i, outcome| match outcome {
            Ok(candidate) => slots[i] = Some(candidate),
            Err(e) => image_errors.push(e),
        },
    );
    if let Some(e) = image_errors.into_iter().next() {
        return Err(e.into());
    }
    let candidates: Vec<CorrectionCandidate> = slots.into_iter().flatten().collect();

    let mut buf = Vec::new();
    for c in &candidates {
        serde_json::to_writer(&mut buf, c).expect("candidate serializes");
        buf.push(b'\n');
    }
    write_atomic(&config.output_dir.join(CORRECTIONS_FILE), &buf)?;
    write_manifest(
        &config.output_dir,
        &CorrectionManifest {
            template_version: TEMPLATE_VERSION.to_string(),
            config: config.clone(),
            selection,
            requested: n,
            selected: chosen.iter().map(|r| r.id.clone()).collect(),
            budget,
            prompt_hashes: vec![correction_template_hash(), detection_template_hash(PromptTier::Complete, true)],
        },
    )?;
    Ok(candidates)
}

pub fn read_corrections(path: &Path) -> Result<Vec<CorrectionCandidate>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Io {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<MemeRecord> {
        (0..n)
            .map(|i| MemeRecord {
                id: format!("{i:03}"),
                image_path: format!("img/{i:03}.png").into(),
                label: Some(1),
                text: "t".into(),
            })
            .collect()
    }

    #[test]
    fn pool_visits_every_item_once() {
        let items: Vec<usize> = (0..100).collect();
        for p in [1, 3, 8, 500] {
            let mut seen = vec![0; items.len()];
            run_pool(&items, p, |x| x * 2, |i, r| {
                assert_eq!(r, i * 2);
                seen[i] += 1;
            });
            assert!(seen.iter().all(|&c| c == 1));
        }
        run_pool(&[] as &[u8], 4, |_| (), |_, _| panic!("no items"));
    }

    #[test]
    fn selection_policies() {
        let pool = records(10);
        let first: Vec<_> = select_memes(&pool, Selection::FirstN, 3, 0).into_iter().map(|r| r.id).collect();
        assert_eq!(first, ["000", "001", "002"]);
        assert!(select_memes(&pool, Selection::FirstN, 0, 0).is_empty());
        assert_eq!(select_memes(&pool, Selection::FirstN, 50, 0).len(), 10);

        let a = select_memes(&pool, Selection::SeededRandom, 4, 7);
        let b = select_memes(&pool, Selection::SeededRandom, 4, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0].id < w[1].id));
        let others: Vec<_> = (0..20).map(|s| select_memes(&pool, Selection::SeededRandom, 4, s)).collect();
        assert!(others.iter().any(|o| o != &a));
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new("d", SplitName::DevSeen, "o");
        assert!(c.validate().is_ok());
        c.trials_k = 0;
        assert!(c.validate().is_err());
        c.trials_k = 5;
        c.parallelism = 0;
        assert!(c.validate().is_err());
    }
}
