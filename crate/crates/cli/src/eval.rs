use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use memeshield_core::dataset::SplitName;
use memeshield_core::metrics::{reference, EvalReport, PerMemeRow, RunMeta};
use memeshield_core::pipeline::{self, read_results, write_atomic};
use memeshield_core::prompt::detection_template_hash;

#[derive(Args)]
pub struct EvalArgs {
    /// results.jsonl written by `detect`.
    #[arg(long)]
    pub results: PathBuf,
    /// Report path; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Split name; read from the neighbouring manifest.json when omitted.
    #[arg(long)]
    pub split: Option<SplitName>,
    /// Print the deviation from the published zero-shot numbers.
    #[arg(long)]
    pub compare_reference: bool,
}

fn manifest_field(results: &Path, key: &str) -> Option<serde_json::Value> {
    let path = results.parent()?.join(pipeline::MANIFEST_FILE);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()?;
    manifest.get("config")?.get(key).cloned()
}

pub fn run(args: &EvalArgs) -> Result<ExitCode> {
    if !args.results.is_file() {
        bail!("{} does not exist", args.results.display());
    }
    let results = read_results(&args.results)?;
    let Some(first) = results.first() else {
        bail!("{} holds no results", args.results.display());
    };
    let settings = &first.result.config_snapshot;
    if let Some(other) = results.iter().find(|r| &r.result.config_snapshot != settings) {
        bail!("meme {} was scored with different settings than {}", other.result.meme_id, first.result.meme_id);
    }
    let split = match args.split {
        Some(s) => s,
        None => manifest_field(&args.results, "split")
            .and_then(|v| serde_json::from_value(v).ok())
            .context("pass --split (no manifest.json next to the results)")?,
    };
    let timestamp = manifest_field(&args.results, "timestamp").and_then(|v| v.as_str().map(str::to_string));

    let rows = results
        .iter()
        .map(|r| {
            let label = r.label.with_context(|| format!("meme {} has no gold label", r.result.meme_id))?;
            Ok(PerMemeRow {
                id: r.result.meme_id.clone(),
                label,
                pred: r.result.predicted_label,
                score: r.result.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = RunMeta {
        tier: settings.tier,
        k: settings.k,
        use_ocr: settings.use_ocr,
        model_id: settings.inference.model_id.clone(),
        prompt_hash: detection_template_hash(settings.tier, settings.use_ocr),
        timestamp,
    };
    let report = EvalReport::from_rows(split, rows, meta)?;
    write_atomic(&args.out, report.to_json().as_bytes())?;
    write_atomic(&args.out.with_extension("csv"), report.to_csv().as_bytes())?;

    println!(
        "{split}: n={} accuracy {:.4} auroc {}",
        report.n,
        report.accuracy,
        report.auroc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    if args.compare_reference {
        print_reference(&report);
    }
    Ok(ExitCode::SUCCESS)
}

fn print_reference(report: &EvalReport) {
    let row = reference::row(report.run_meta.use_ocr);
    println!(
        "reference {}: test_seen {:.2}/{:.2}  test_unseen {:.2}/{:.2} (accuracy/AUROC %)",
        row.label, row.seen_accuracy, row.seen_auroc, row.unseen_accuracy, row.unseen_auroc
    );
    match reference::compare(report) {
        Some(d) => {
            let auroc = match (d.auroc, d.auroc_delta) {
                (Some(a), Some(delta)) => format!("{a:.2} ({delta:+.2})"),
                _ => "n/a".to_string(),
            };
            println!("this run: accuracy {:.2} ({:+.2})  AUROC {auroc}", d.accuracy, d.accuracy_delta);
        }
        None => println!("no reference values for {}; nothing to compare", report.split),
    }
    let (lo, hi) = reference::OCR_AUROC_GAIN;
    println!("expected AUROC gain from OCR text: {lo}-{hi} points");
}
