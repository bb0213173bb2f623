//! Rewriting the text of a hateful meme so the meme becomes non-hateful,
//! with automatic re-verification through the detector.
//!
//! The image is never modified: every attempt sends the original image bytes
//! and only the text changes.

use std::path::PathBuf;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ImageData, MemeRecord};
use crate::detection::{DetectError, Detector};
use crate::gateway::{ChatRequest, GatewayError, InferenceConfig, RequestDigest, VisionGateway};
use crate::prompt::{build_correction_prompt, PromptTier};
use crate::verdict::{DetectionResult, DetectionSettings, TieBreak};

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no replacement text found in the response")]
    ExtractionFailed,
    #[error("replacement text is identical to the original")]
    Unchanged,
    #[error("verification failed: {0}")]
    Verification(#[from] DetectError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionStatus {
    VerifiedNonhateful,
    VerificationFailed,
    GenerationFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionAttempt {
    pub attempt: u32,
    pub request_digest: Option<RequestDigest>,
    pub generated_text: Option<String>,
    pub verified_label: Option<u8>,
    pub verified_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCandidate {
    pub meme_id: String,
    pub image_path: PathBuf,
    pub original_text: String,
    pub generated_text: String,
    pub raw_response: String,
    pub verification: Option<DetectionResult>,
    pub attempts: u32,
    pub status: CorrectionStatus,
    pub attempt_log: Vec<CorrectionAttempt>,
}

impl CorrectionCandidate {
    /// Checks the status/verification/text invariants against `budget`.
    pub fn is_consistent(&self, budget: u32) -> bool {
        let status_ok = match self.status {
            CorrectionStatus::VerifiedNonhateful => {
                self.verification.as_ref().is_some_and(|v| v.predicted_label == 0)
            }
            CorrectionStatus::VerificationFailed => {
                self.verification.as_ref().is_some_and(|v| v.predicted_label == 1)
            }
            CorrectionStatus::GenerationFailed => self.verification.is_none(),
        };
        let text_ok = self.status == CorrectionStatus::GenerationFailed
            || (!self.generated_text.trim().is_empty() && self.generated_text != self.original_text);
        status_ok
            && text_ok
            && self.attempts >= 1
            && self.attempts <= budget
            && self.attempt_log.len() == self.attempts as usize
    }
}

static NEW_TEXT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[\s*_#>`\-]*new\s+text[\s*_`]*:[\s*_`]*(.*)$").unwrap());
static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""([^"\n]+)"|“([^”\n]+)”"#).unwrap());

fn clean(text: &str) -> String {
    text.trim()
        .trim_matches(|c: char| matches!(c, '*' | '_' | '`'))
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '“' | '”'))
        .trim()
        .to_string()
}

/// Pulls the replacement text out of a reply: the last `New text:` line (or
/// the next non-empty line when the marker stands alone), else the longest
/// quoted string.
pub fn extract_new_text(response: &str) -> Option<String> {
    let lines: Vec<&str> = response.lines().collect();
    for (i, line) in lines.iter().enumerate().rev() {
        if let Some(caps) = NEW_TEXT_LINE.captures(line) {
            let inline = clean(&caps[1]);
            if !inline.is_empty() {
                return Some(inline);
            }
            if let Some(next) = lines[i + 1..].iter().map(|l| clean(l)).find(|l| !l.is_empty()) {
                return Some(next);
            }
        }
    }
    QUOTED
        .captures_iter(response)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().trim().to_string())
        .filter(|s| !s.is_empty())
        .fold(None, |best: Option<String>, s| match best {
            Some(b) if b.chars().count() >= s.chars().count() => Some(b),
            _ => Some(s),
        })
}

pub struct Corrector {
    gateway: Arc<dyn VisionGateway>,
    inference: InferenceConfig,
    verifier: Detector,
}

impl Corrector {
    /// Verification always uses the complete-tier prompt with the rewrite
    /// injected as OCR text, over `k` trials.
    pub fn new(gateway: Arc<dyn VisionGateway>, inference: InferenceConfig, k: usize, tie_break: TieBreak) -> Self {
        let settings = DetectionSettings {
            tier: PromptTier::Complete,
            k,
            use_ocr: true,
            tie_break,
            inference: inference.clone(),
        };
        Self {
            verifier: Detector::new(gateway.clone(), settings),
            gateway,
            inference,
        }
    }

    /// One generation request; `attempt` salts the request digest.
    pub fn generate_text(
        &self,
        record: &MemeRecord,
        image: &ImageData,
        attempt: u32,
    ) -> Result<(String, String, RequestDigest), CorrectionError> {
        let prompt = build_correction_prompt();
        let request = ChatRequest {
            prompt: &prompt,
            image,
            config: &self.inference,
            trial_index: attempt,
        };
        let exchange = self.gateway.complete(request)?;
        let text = extract_new_text(&exchange.response_text).ok_or(CorrectionError::ExtractionFailed)?;
        if text == record.text.trim() {
            return Err(CorrectionError::Unchanged);
        }
        Ok((text, exchange.response_text, exchange.request_digest))
    }

    pub fn correct_meme(&self, record: &MemeRecord, image: &ImageData, budget: u32) -> CorrectionCandidate {
        let budget = budget.max(1);
        let mut candidate = CorrectionCandidate {
            meme_id: record.id.clone(),
            image_path: record.image_path.clone(),
            original_text: record.text.clone(),
            generated_text: String::new(),
            raw_response: String::new(),
            verification: None,
            attempts: 0,
            status: CorrectionStatus::GenerationFailed,
            attempt_log: Vec::new(),
        };
        for attempt in 0..budget {
            candidate.attempts = attempt + 1;
            let mut log_entry = CorrectionAttempt {
                attempt,
                request_digest: None,
                generated_text: None,
                verified_label: None,
                verified_score: None,
                error: None,
            };
            let outcome = self.generate_text(record, image, attempt).and_then(|(text, raw, digest)| {
                log_entry.request_digest = Some(digest);
                log_entry.generated_text = Some(text.clone());
                let verification = self.verifier.detect(&record.id, image, &text)?;
                Ok((text, raw, verification))
            });
            match outcome {
                Ok((text, raw, verification)) => {
                    log_entry.verified_label = Some(verification.predicted_label);
                    log_entry.verified_score = Some(verification.score);
                    let passed = verification.predicted_label == 0;
                    candidate.generated_text = text;
                    candidate.raw_response = raw;
                    candidate.verification = Some(verification);
                    candidate.status = if passed {
                        CorrectionStatus::VerifiedNonhateful
                    } else {
                        CorrectionStatus::VerificationFailed
                    };
                    candidate.attempt_log.push(log_entry);
                    if passed {
                        break;
                    }
                }
                Err(e) => {
                    log::warn!("meme {} correction attempt {attempt}: {e}", record.id);
                    log_entry.error = Some(e.to_string());
                    candidate.attempt_log.push(log_entry);
                }
            }
        }
        candidate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contract_line_wins() {
        let r = "The image shows people at a market.\nNew text: Celebrating the beautiful diversity of our community";
        assert_eq!(
            extract_new_text(r).as_deref(),
            Some("Celebrating the beautiful diversity of our community")
        );
    }

    #[test]
    fn contract_line_variants() {
        assert_eq!(extract_new_text("**New text:** \"Be kind\"").as_deref(), Some("Be kind"));
        assert_eq!(extract_new_text("new TEXT:\n\n  Friends share snacks\n").as_deref(), Some("Friends share snacks"));
        assert_eq!(
            extract_new_text("New text: first\nsome notes\nNew text: second").as_deref(),
            Some("second")
        );
    }

    #[test]
    fn quoted_fallback_takes_longest() {
        let r = "I would suggest \"Love\" or maybe \"Everyone deserves a seat at the table\".";
        assert_eq!(extract_new_text(r).as_deref(), Some("Everyone deserves a seat at the table"));
        assert_eq!(extract_new_text("Try “Neighbors helping neighbors”").as_deref(), Some("Neighbors helping neighbors"));
    }

    #[test]
    fn nothing_to_extract() {
        assert_eq!(extract_new_text("I am unable to help with that."), None);
        assert_eq!(extract_new_text("New text:\n"), None);
    }
}
