//! Accuracy, tie-aware AUROC and the per-split evaluation report.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Split, SplitName};
use crate::prompt::PromptTier;
use crate::verdict::DetectionResult;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("AUROC is undefined when only one class is present")]
    UndefinedAuroc,
    #[error("meme {0:?} has no gold label")]
    MissingLabel(String),
    #[error("result for meme {0:?} has no record in the split")]
    JoinError(String),
}

fn check_labels(labels: &[u8]) -> Result<(), MetricsError> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(MetricsError::InvalidInput(format!("label {l} is not 0 or 1"))),
        None => Ok(()),
    }
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64, MetricsError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(MetricsError::InvalidInput(format!(
            "need equal non-zero lengths, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    check_labels(labels)?;
    check_labels(predictions)?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mann-Whitney AUROC with midranks for tied scores, in O(n log n).
///
/// Ranks are tracked doubled so every midrank is an integer; the result is
/// therefore bit-identical to the pairwise definition where a tie counts 1/2.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_labels(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::InvalidInput("scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::UndefinedAuroc);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum over positives of 2 * midrank (1-based ranks).
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end; doubled midrank = start + 1 + end
        let doubled_midrank = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        doubled_rank_sum += doubled_midrank * pos_in_group;
        start = end;
    }
    // 2U = 2R - P(P+1)
    let doubled_u = doubled_rank_sum - positives * (positives + 1);
    Ok(doubled_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tier: PromptTier,
    pub k: usize,
    pub use_ocr: bool,
    pub model_id: String,
    pub prompt_hash: String,
    /// RFC 3339 wall-clock time of the run; absent for replay runs so that
    /// reports stay byte-reproducible.
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerMemeRow {
    pub id: String,
    pub label: u8,
    pub pred: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub n: usize,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub run_meta: RunMeta,
    pub per_meme: Vec<PerMemeRow>,
}

impl EvalReport {
    /// Builds a report from already-joined rows; rows are sorted by id.
    pub fn from_rows(split: SplitName, mut rows: Vec<PerMemeRow>, run_meta: RunMeta) -> Result<Self, MetricsError> {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let preds: Vec<u8> = rows.iter().map(|r| r.pred).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let accuracy = accuracy(&preds, &labels)?;
        let auroc = match auroc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(MetricsError::UndefinedAuroc) => {
                log::warn!("{split}: single-class labels, AUROC undefined");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            split,
            n: rows.len(),
            accuracy,
            auroc,
            run_meta,
            per_meme: rows,
        })
    }

    /// Recomputes both metrics from `per_meme`.
    pub fn recompute(&self) -> Result<(f64, Option<f64>), MetricsError> {
        let r = Self::from_rows(self.split, self.per_meme.clone(), self.run_meta.clone())?;
        Ok((r.accuracy, r.auroc))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label,pred,score\n");
        for row in &self.per_meme {
            out.push_str(&format!("{},{},{},{}\n", csv_field(&row.id), row.label, row.pred, row.score));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn build_report(results: &[DetectionResult], split: &Split, run_meta: RunMeta) -> Result<EvalReport, MetricsError> {
    let by_id: HashMap<&str, _> = split.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let rows = results
        .iter()
        .map(|res| {
            let record = by_id
                .get(res.meme_id.as_str())
                .ok_or_else(|| MetricsError::JoinError(res.meme_id.clone()))?;
            let label = record.label.ok_or_else(|| MetricsError::MissingLabel(res.meme_id.clone()))?;
            Ok(PerMemeRow {
                id: res.meme_id.clone(),
                label,
                pred: res.predicted_label,
                score: res.score,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    EvalReport::from_rows(split.name, rows, run_meta)
}

/// Published zero-shot numbers for the LLaVA-Llama-2-13B setup, in percent.
pub mod reference {
    use crate::dataset::SplitName;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct ReferenceRow {
        pub label: &'static str,
        pub use_ocr: bool,
        pub seen_accuracy: f64,
        pub seen_auroc: f64,
        pub unseen_accuracy: f64,
        pub unseen_auroc: f64,
    }

    pub const ROWS: [ReferenceRow; 2] = [
        ReferenceRow {
            label: "LL-2 0-shot",
            use_ocr: false,
            seen_accuracy: 63.00,
            seen_auroc: 65.77,
            unseen_accuracy: 62.15,
            unseen_auroc: 63.92,
        },
        ReferenceRow {
            label: "LL-2+OCR 0-shot",
            use_ocr: true,
            seen_accuracy: 62.50,
            seen_auroc: 67.07,
            unseen_accuracy: 64.20,
            unseen_auroc: 64.12,
        },
    ];

    /// Expected AUROC gain from OCR injection on test splits, percent points.
    pub const OCR_AUROC_GAIN: (f64, f64) = (1.3, 2.0);

    pub fn row(use_ocr: bool) -> &'static ReferenceRow {
        ROWS.iter().find(|r| r.use_ocr == use_ocr).expect("both rows present")
    }

    /// (accuracy, AUROC) reference for a split, in percent.
    pub fn target(split: SplitName, use_ocr: bool) -> Option<(f64, f64)> {
        let r = row(use_ocr);
        match split {
            SplitName::TestSeen => Some((r.seen_accuracy, r.seen_auroc)),
            SplitName::TestUnseen => Some((r.unseen_accuracy, r.unseen_auroc)),
            _ => None,
        }
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct Deviation {
        pub reference_label: &'static str,
        pub accuracy: f64,
        pub accuracy_delta: f64,
        pub auroc: Option<f64>,
        pub auroc_delta: Option<f64>,
    }

    /// Deviation of a report from the reference row, percent points.
    pub fn compare(report: &super::EvalReport) -> Option<Deviation> {
        let (acc_ref, auroc_ref) = target(report.split, report.run_meta.use_ocr)?;
        let accuracy = report.accuracy * 100.0;
        let auroc = report.auroc.map(|a| a * 100.0);
        Some(Deviation {
            reference_label: row(report.run_meta.use_ocr).label,
            accuracy,
            accuracy_delta: accuracy - acc_ref,
            auroc,
            auroc_delta: auroc.map(|a| a - auroc_ref),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let (mut p, mut n) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                p += 1.0;
                for (j, &lj) in labels.iter().enumerate() {
                    if lj == 0 {
                        num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            } else {
                n += 1.0;
            }
        }
        num / (p * n)
    }

    fn meta() -> RunMeta {
        RunMeta {
            tier: PromptTier::Complete,
            k: 5,
            use_ocr: false,
            model_id: "m".into(),
            prompt_hash: "h".into(),
            timestamp: None,
        }
    }

    #[test]
    fn accuracy_examples() {
        let a = accuracy(&[1, 0, 1], &[1, 0, 0]).unwrap();
        assert!((a - 0.6667).abs() < 1e-4);
        assert_eq!(accuracy(&[1, 0], &[1, 0]).unwrap(), 1.0);
        assert!(matches!(accuracy(&[], &[]), Err(MetricsError::InvalidInput(_))));
        assert!(matches!(accuracy(&[1], &[1, 0]), Err(MetricsError::InvalidInput(_))));
        assert!(matches!(accuracy(&[2], &[1]), Err(MetricsError::InvalidInput(_))));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        let s = [0.8, 0.4, 0.4, 0.2];
        let l = [1, 1, 0, 0];
        assert_eq!(pairwise(&s, &l), 0.875);
        assert_eq!(auroc(&s, &l).unwrap(), 0.875);
    }

    #[test]
    fn auroc_errors() {
        assert_eq!(auroc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::UndefinedAuroc));
        assert_eq!(auroc(&[], &[]), Err(MetricsError::UndefinedAuroc));
        assert!(matches!(auroc(&[0.1], &[1, 0]), Err(MetricsError::InvalidInput(_))));
        assert!(matches!(auroc(&[f64::NAN, 0.1], &[1, 0]), Err(MetricsError::InvalidInput(_))));
    }

    #[test]
    fn report_counts_and_csv() {
        let rows = vec![
            PerMemeRow { id: "b".into(), label: 1, pred: 1, score: 0.8 },
            PerMemeRow { id: "a".into(), label: 0, pred: 0, score: 0.2 },
            PerMemeRow { id: "d".into(), label: 1, pred: 0, score: 0.4 },
            PerMemeRow { id: "c".into(), label: 0, pred: 0, score: 0.0 },
        ];
        let report = EvalReport::from_rows(SplitName::DevSeen, rows, meta()).unwrap();
        assert_eq!(report.n, 4);
        assert_eq!(report.accuracy, 0.75);
        assert_eq!(report.auroc, Some(1.0));
        assert_eq!(report.per_meme[0].id, "a");
        assert_eq!(report.recompute().unwrap(), (0.75, Some(1.0)));
        assert_eq!(
            report.to_csv(),
            "id,label,pred,score\na,0,0,0.2\nb,1,1,0.8\nc,0,0,0\nd,1,0,0.4\n"
        );
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn reference_comparison() {
        let rows = vec![
            PerMemeRow { id: "a".into(), label: 1, pred: 1, score: 1.0 },
            PerMemeRow { id: "b".into(), label: 0, pred: 1, score: 0.6 },
        ];
        let report = EvalReport::from_rows(SplitName::TestSeen, rows, meta()).unwrap();
        let dev = reference::compare(&report).unwrap();
        assert_eq!(dev.reference_label, "LL-2 0-shot");
        assert!((dev.accuracy_delta - (50.0 - 63.00)).abs() < 1e-9);
        assert!((dev.auroc_delta.unwrap() - (100.0 - 65.77)).abs() < 1e-9);
        assert_eq!(reference::target(SplitName::TestUnseen, true), Some((64.20, 64.12)));
        assert_eq!(reference::target(SplitName::DevSeen, true), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
            (2usize..120)
                .prop_flat_map(|n| {
                    (
                        proptest::collection::vec((0u8..8).prop_map(|b| b as f64 / 7.0), n),
                        proptest::collection::vec(0u8..=1, n),
                    )
                })
                .prop_filter("two classes", |(_, l)| l.contains(&0) && l.contains(&1))
        }

        proptest! {
            #[test]
            fn fast_equals_pairwise((s, l) in scored()) {
                prop_assert_eq!(auroc(&s, &l).unwrap(), pairwise(&s, &l));
            }

            #[test]
            fn flipping_labels_complements((s, l) in scored()) {
                let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
                let sum = auroc(&s, &l).unwrap() + auroc(&s, &flipped).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }

            #[test]
            fn monotone_transform_invariant((s, l) in scored()) {
                let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
                prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            }

            #[test]
            fn accuracy_permutation_invariant(
                pairs in proptest::collection::vec((0u8..=1, 0u8..=1), 1..60),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut shuffled = pairs.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let split = |v: &[(u8, u8)]| -> (Vec<u8>, Vec<u8>) { v.iter().copied().unzip() };
                let (p1, l1) = split(&pairs);
                let (p2, l2) = split(&shuffled);
                prop_assert_eq!(accuracy(&p1, &l1).unwrap(), accuracy(&p2, &l2).unwrap());
            }
        }
    }
}
