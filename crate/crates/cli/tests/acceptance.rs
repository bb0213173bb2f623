//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use memeshield_core::correction::{CorrectionCandidate, CorrectionStatus, Corrector};
use memeshield_core::dataset::{load_split, resolve_image};
use memeshield_core::gateway::{FixtureStore, ReplayGateway, VisionGateway};
use memeshield_core::metrics::auroc;
use memeshield_core::pipeline::{run_detection, RunConfig, REPORT_JSON, RESULTS_FILE};
use memeshield_core::verdict::{aggregate_trials, parse_verdict, MatchedRule, TieBreak, VerdictValue};
use memeshield_review::store::{read_events, EVENT_LOG};
use memeshield_review::{ExpertVerdict, Judgment, ReviewError, ReviewState, ReviewStore};
use rand::{Rng, SeedableRng};
use serde::Deserialize;

const AUROC_INSTANCES: usize = 1000;
const AUROC_MAX_N: usize = 200;
const AUROC_LIMIT: Duration = Duration::from_secs(10);
const VOTE_LIMIT: Duration = Duration::from_secs(1);
const REPLAY_LIMIT: Duration = Duration::from_secs(30);
const RATE_TOLERANCE: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Counts positive-over-negative wins two per win and one per tie.
fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut doubled, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    doubled as f64 / (2 * p * n) as f64
}

fn auroc_oracle() -> Outcome {
    let start = Instant::now();
    let pinned = auroc(&[0.8, 0.4, 0.4, 0.2], &[1, 1, 0, 0]).map_err(|e| e.to_string())?;
    check(pinned == 0.875, format!("pinned case gave {pinned}"))?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240917);
    let mut tied_instances = 0;
    for case in 0..AUROC_INSTANCES {
        let n = rng.gen_range(2..=AUROC_MAX_N);
        // few distinct levels force heavy ties; k/5 mirrors k=5 vote scores
        let levels = rng.gen_range(2..=12);
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / (levels - 1) as f64).collect();
        if case % 4 == 3 {
            let base: Vec<f64> = (0..n / 2 + 1).map(|_| rng.gen::<f64>()).collect();
            scores = (0..n).map(|i| base[i % base.len()]).collect();
        }
        scores[n - 1] = scores[rng.gen_range(0..n - 1)];
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied_instances += 1;
        }
        let fast = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let oracle = pairwise_auroc(&scores, &labels);
        check(fast == oracle, format!("instance {case}: fast {fast} vs pairwise {oracle}"))?;
    }
    let elapsed = start.elapsed();
    check(tied_instances == AUROC_INSTANCES, format!("only {tied_instances} instances had duplicate scores"))?;
    check(elapsed < AUROC_LIMIT, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{AUROC_INSTANCES} instances (n <= {AUROC_MAX_N}, all with ties) equal pairwise exactly; [0.8,0.4,0.4,0.2]/[1,1,0,0] = 0.875; {elapsed:.2?} < {AUROC_LIMIT:?}"
    ))
}

const VALUES: [VerdictValue; 3] = [VerdictValue::Hateful, VerdictValue::NonHateful, VerdictValue::Abstain];

fn permutations(v: &[VerdictValue]) -> Vec<Vec<VerdictValue>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn majority_vote() -> Outcome {
    let start = Instant::now();
    let k = 5;
    let mut vectors = 0;
    for code in 0..3usize.pow(k as u32) {
        let v: Vec<VerdictValue> = (0..k).map(|i| VALUES[code / 3usize.pow(i as u32) % 3]).collect();
        vectors += 1;
        let h = v.iter().filter(|x| **x == VerdictValue::Hateful).count();
        let nh = v.iter().filter(|x| **x == VerdictValue::NonHateful).count();
        for tie_break in [TieBreak::Hateful, TieBreak::NonHateful] {
            let agg = aggregate_trials(&v, k, tie_break).map_err(|e| e.to_string())?;
            let valid = h + nh;
            if valid == 0 {
                check(
                    (agg.predicted_label, agg.score, agg.low_confidence) == (0, 0.5, true),
                    format!("all-abstain {v:?} gave {agg:?}"),
                )?;
            } else {
                let tie = h == nh;
                let label = if tie { u8::from(tie_break == TieBreak::Hateful) } else { u8::from(h > nh) };
                check(agg.score == h as f64 / valid as f64, format!("{v:?}: score {}", agg.score))?;
                check(agg.predicted_label == label, format!("{v:?} {tie_break:?}: label {}", agg.predicted_label))?;
                check(agg.low_confidence == (valid < 3 || tie), format!("{v:?}: low_confidence {}", agg.low_confidence))?;
            }
            for p in permutations(&v) {
                check(aggregate_trials(&p, k, tie_break) == Ok(agg), format!("{v:?} not permutation invariant"))?;
            }
            // flipping any single trial towards Hateful never lowers score or label
            for i in 0..k {
                if v[i] == VerdictValue::Hateful {
                    continue;
                }
                let mut up = v.clone();
                up[i] = VerdictValue::Hateful;
                let up = aggregate_trials(&up, k, tie_break).map_err(|e| e.to_string())?;
                check(
                    up.score >= agg.score && up.predicted_label >= agg.predicted_label,
                    format!("{v:?}: raising trial {i} lowered the outcome"),
                )?;
            }
        }
    }
    let elapsed = start.elapsed();
    check(vectors == 243, format!("enumerated {vectors} vectors"))?;
    check(elapsed < VOTE_LIMIT, format!("took {elapsed:?}"))?;
    Ok(format!(
        "all 243 verdict vectors x 2 tie-breaks: permutation invariance, monotonicity, tie and abstain rules hold; {elapsed:.2?} < {VOTE_LIMIT:?}"
    ))
}

#[derive(Deserialize)]
struct CorpusCase {
    kind: String,
    response: String,
    value: VerdictValue,
    rule: MatchedRule,
}

fn parser_corpus() -> Outcome {
    let path = support::fixtures_dir().join("parser_corpus.json");
    let cases: Vec<CorpusCase> =
        serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check(cases.len() >= 30, format!("corpus has only {} cases", cases.len()))?;
    let mut kinds: Vec<&str> = cases.iter().map(|c| c.kind.as_str()).collect();
    kinds.sort_unstable();
    kinds.dedup();
    let misses: Vec<usize> = cases
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let v = parse_verdict(&c.response);
            (v.value, v.matched_rule) != (c.value, c.rule)
        })
        .map(|(i, _)| i)
        .collect();
    check(misses.is_empty(), format!("mismatched cases {misses:?}"))?;
    Ok(format!("{}/{} responses match pinned verdict and rule (kinds: {})", cases.len(), cases.len(), kinds.join(", ")))
}

fn replay() -> Arc<dyn VisionGateway> {
    Arc::new(ReplayGateway::new(FixtureStore::new(support::replay_dir())))
}

fn replay_config(out: &Path, use_ocr: bool, parallelism: usize) -> RunConfig {
    let script = support::load_script();
    let mut c = RunConfig::new(support::data_root(), support::SPLIT, out);
    c.use_ocr = use_ocr;
    c.parallelism = parallelism;
    c.trials_k = script.trials;
    c.inference = support::inference(&script);
    c
}

fn replay_determinism(keep: &Path) -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    for use_ocr in [false, true] {
        let golden_path = support::fixtures_dir().join(format!("golden/report_{}.json", if use_ocr { "ocr" } else { "no_ocr" }));
        let golden = std::fs::read_to_string(&golden_path).map_err(|e| e.to_string())?;
        for parallelism in [1, 8] {
            let out = keep.join(format!("ocr{use_ocr}_p{parallelism}"));
            let run = run_detection(&replay_config(&out, use_ocr, parallelism), replay()).map_err(|e| e.to_string())?;
            check(!run.degraded(), "replay run degraded")?;
            let report = std::fs::read_to_string(out.join(REPORT_JSON)).map_err(|e| e.to_string())?;
            check(report == golden, format!("ocr={use_ocr} parallelism={parallelism} differs from golden"))?;
            runs += 1;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < REPLAY_LIMIT, format!("took {elapsed:?}"))?;
    Ok(format!("{runs} runs (OCR off/on x parallelism 1/8) byte-identical to golden reports; {elapsed:.2?} < {REPLAY_LIMIT:?}"))
}

fn reference_comparison(runs: &Path) -> Outcome {
    let mut shown = Vec::new();
    for (use_ocr, label, seen) in [(false, "LL-2 0-shot", "63.00/65.77"), (true, "LL-2+OCR 0-shot", "62.50/67.07")] {
        let results = runs.join(format!("ocr{use_ocr}_p1")).join(RESULTS_FILE);
        let report = runs.join(format!("compare_{use_ocr}.json"));
        let out = Command::new(env!("CARGO_BIN_EXE_memeshield"))
            .args(["eval", "--results"])
            .arg(&results)
            .arg("--out")
            .arg(&report)
            .args(["--split", "test_seen", "--compare-reference"])
            .output()
            .map_err(|e| e.to_string())?;
        let text = String::from_utf8_lossy(&out.stdout);
        check(out.status.success(), format!("eval exited with {}", out.status))?;
        check(
            text.contains(&format!("reference {label}: test_seen {seen}")) && text.contains("this run:"),
            format!("unexpected output: {text}"),
        )?;
        for line in text.lines().filter(|l| l.starts_with("this run")) {
            shown.push(format!("{label} {line}"));
        }
    }
    for line in &shown {
        println!("      {line}");
    }
    Ok("eval --compare-reference prints deviations from 63.00/65.77 and 62.50/67.07 without asserting".into())
}

fn correction_contract() -> Outcome {
    let script = support::load_script();
    let root = support::data_root();
    let split = load_split(&root, support::SPLIT).map_err(|e| e.to_string())?;
    let corrector = Corrector::new(replay(), support::inference(&script), script.trials, TieBreak::Hateful);
    let run = |id: &str, budget: u32| -> Result<CorrectionCandidate, String> {
        let record = split.get(id).ok_or(format!("meme {id} missing"))?;
        let image = resolve_image(record, &root).map_err(|e| e.to_string())?;
        Ok(corrector.correct_meme(record, &image, budget))
    };
    let first = run("10243", 3)?;
    check(
        (first.status, first.attempts) == (CorrectionStatus::VerifiedNonhateful, 1),
        format!("10243 gave {:?}/{}", first.status, first.attempts),
    )?;
    let exhausted = run("11052", 2)?;
    check(
        (exhausted.status, exhausted.attempts) == (CorrectionStatus::VerificationFailed, 2),
        format!("11052 gave {:?}/{}", exhausted.status, exhausted.attempts),
    )?;
    Ok("attempt-1 verification -> verified_nonhateful/1; two hateful rewrites at budget 2 -> verification_failed/2".into())
}

fn review_candidates(n: usize) -> Vec<CorrectionCandidate> {
    (0..n)
        .map(|i| CorrectionCandidate {
            meme_id: format!("{}", 20000 + i),
            image_path: format!("img/{}.png", 20000 + i).into(),
            original_text: format!("original {i}"),
            generated_text: format!("rewrite {i}"),
            raw_response: format!("New text: rewrite {i}"),
            verification: None,
            attempts: 1,
            status: CorrectionStatus::VerifiedNonhateful,
            attempt_log: vec![],
        })
        .collect()
}

fn review_aggregation(state_dir: &Path) -> Outcome {
    const ITEMS: usize = 50;
    const SUCCESSES: usize = 46;
    let panel: Vec<String> = (1..=7).map(|i| format!("expert{i}")).collect();
    let store = ReviewStore::open(state_dir).map_err(|e| e.to_string())?;
    let batch = store.create_batch(&review_candidates(ITEMS), &panel, 7).map_err(|e| e.to_string())?;

    // expert1 dissents on 5 successes and all 4 failures: 41/50 agreement
    let mut votes = Vec::new();
    for (i, item) in batch.items.iter().enumerate() {
        let success = i < SUCCESSES;
        for (e, expert) in panel.iter().enumerate() {
            let dissent = (e == 0 && (i < 5 || !success)) || (e == 1 && (10..13).contains(&i));
            votes.push((expert.clone(), item.item_id.clone(), success != dissent));
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(46);
    for i in (1..votes.len()).rev() {
        votes.swap(i, rng.gen_range(0..=i));
    }
    for (expert_id, item_id, success) in votes {
        store
            .submit_verdict(ExpertVerdict {
                expert_id,
                item_id,
                judgment: if success { Judgment::Success } else { Judgment::Failure },
                submitted_at: Utc::now(),
            })
            .map_err(|e| e.to_string())?;
    }
    let summary = store.batch_summary(&batch.batch_id).map_err(|e| e.to_string())?;
    check((summary.success_rate - 0.92).abs() <= RATE_TOLERANCE, format!("success_rate {}", summary.success_rate))?;
    let e1 = summary.per_expert_agreement["expert1"];
    check((e1 - 0.82).abs() <= RATE_TOLERANCE, format!("expert1 agreement {e1}"))?;

    let live = store.state();
    drop(store);
    let reopened = ReviewStore::open(state_dir).map_err(|e| e.to_string())?.state();
    let events = read_events(&state_dir.join(EVENT_LOG)).map_err(|e| e.to_string())?;
    let folded = ReviewState::replay(&events);
    check(reopened == live && folded == live, "replayed state differs from live state")?;

    let store = ReviewStore::open(state_dir).map_err(|e| e.to_string())?;
    let open = store.create_batch(&review_candidates(1), &panel[..3], 3).map_err(|e| e.to_string())?;
    let outsider = store.submit_verdict(ExpertVerdict {
        expert_id: "expert7".into(),
        item_id: open.items[0].item_id.clone(),
        judgment: Judgment::Success,
        submitted_at: Utc::now(),
    });
    check(matches!(outsider, Err(ReviewError::Forbidden { .. })), format!("non-panel verdict gave {outsider:?}"))?;
    let even = store.create_batch(&review_candidates(1), &panel[..4], 4);
    check(matches!(even, Err(ReviewError::InvalidQuorum(4))), format!("even quorum gave {:?}", even.map(|b| b.batch_id)))?;

    Ok(format!(
        "7 experts x {ITEMS} items: success_rate {:.2} (46/50), expert1 agreement {e1:.2}; {} events replay to identical state; non-panel and even quorum rejected",
        summary.success_rate,
        events.len()
    ))
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let runs = scratch.path().join("runs");
    let review = scratch.path().join("review");
    let criteria: Vec<Criterion> = vec![
        ("auroc_oracle_equivalence", Box::new(auroc_oracle)),
        ("majority_vote_properties", Box::new(majority_vote)),
        ("parser_corpus", Box::new(parser_corpus)),
        ("replay_end_to_end_determinism", Box::new(|| replay_determinism(&runs))),
        ("table1_reference_comparison", Box::new(|| reference_comparison(&runs))),
        ("correction_loop_contract", Box::new(correction_contract)),
        ("review_aggregation", Box::new(|| review_aggregation(&review))),
    ];
    let mut failed = 0;
    for (name, criterion) in &criteria {
        match criterion() {
            Ok(detail) => println!("PASS  {name:<30} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<30} {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
