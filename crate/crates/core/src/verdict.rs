//! Turning free-text model replies into verdicts, and k trial verdicts into
//! a label and a vote-fraction score.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatExchange, InferenceConfig};
use crate::prompt::PromptTier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictValue {
    Hateful,
    NonHateful,
    Abstain,
}

/// Parser rule that produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchedRule {
    /// Final `Classification: ...` line.
    R1,
    /// Last hateful / not-hateful marker in the body.
    R2,
    /// Conclusion phrased in terms of hate speech.
    R3,
    /// Nothing recognisable.
    R4,
}

impl fmt::Display for MatchedRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    pub rationale: String,
    pub matched_rule: MatchedRule,
}

static CLASSIFICATION_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^[^a-z0-9]*(?:final\s+)?classification\s*[:=\-–—]?\s*[^a-z0-9]*(not\s+hateful|non[\s\-]?hateful|hateful)[^a-z0-9]*$",
    )
    .unwrap()
});

/// (pattern, polarity) pairs for conclusions that avoid the word "hateful".
static CONCLUSION_PHRASES: LazyLock<Vec<(Regex, VerdictValue)>> = LazyLock::new(|| {
    use VerdictValue::*;
    [
        (r"\b(?:is|are|be)\s+not\s+(?:considered\s+)?(?:an?\s+)?(?:example\s+of\s+)?hate\s+speech\b", NonHateful),
        (r"\b(?:does\s+not|doesn't|do\s+not|don't)\s+(?:contain|constitute|promote|express|convey|spread)\s+(?:any\s+)?hate\b", NonHateful),
        (r"\bno\s+(?:signs?\s+of\s+)?hate\s+speech\b", NonHateful),
        (r"\bfree\s+(?:of|from)\s+hate\b", NonHateful),
        (r"\b(?:is|are|be)\s+(?:considered\s+)?(?:an?\s+)?(?:form\s+of\s+|example\s+of\s+|instance\s+of\s+)?hate\s+speech\b", Hateful),
        (r"\b(?:contains|constitutes|promotes|expresses|conveys|spreads)\s+hate\b", Hateful),
    ]
    .into_iter()
    .map(|(p, v)| (Regex::new(p).unwrap(), v))
    .collect()
});

const NEGATORS: &[&str] = &["not", "non", "isn't", "isnt", "aren't", "never"];
const NEGATION_WINDOW: usize = 3;

fn strip_markdown(line: &str) -> String {
    line.chars()
        .filter(|c| !matches!(c, '*' | '_' | '`' | '#' | '>'))
        .collect::<String>()
        .trim()
        .to_lowercase()
}

fn normalize(text: &str) -> String {
    text.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'")
}

fn rule_one(text: &str) -> Option<Verdict> {
    let lines: Vec<&str> = text.lines().collect();
    let (idx, value) = lines.iter().enumerate().rev().find_map(|(i, line)| {
        let normalized = strip_markdown(line);
        let caps = CLASSIFICATION_LINE.captures(&normalized)?;
        let value = if caps[1].starts_with("hateful") {
            VerdictValue::Hateful
        } else {
            VerdictValue::NonHateful
        };
        Some((i, value))
    })?;
    let rationale = lines
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != idx)
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    Some(Verdict {
        value,
        rationale,
        matched_rule: MatchedRule::R1,
    })
}

fn tokens(text: &str) -> Vec<String> {
    normalize(text)
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn rule_two(text: &str) -> Option<VerdictValue> {
    let toks = tokens(text);
    let mut last = None;
    for (i, tok) in toks.iter().enumerate() {
        match tok.as_str() {
            "nonhateful" => last = Some(VerdictValue::NonHateful),
            "hateful" => {
                let window = &toks[i.saturating_sub(NEGATION_WINDOW)..i];
                let negated = window.iter().any(|t| NEGATORS.contains(&t.as_str()));
                last = Some(if negated {
                    VerdictValue::NonHateful
                } else {
                    VerdictValue::Hateful
                });
            }
            _ => {}
        }
    }
    last
}

fn rule_three(text: &str) -> Option<VerdictValue> {
    let text = normalize(text);
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    CONCLUSION_PHRASES
        .iter()
        .flat_map(|(re, value)| re.find_iter(&text).map(move |m| (m.end(), *value)))
        .max_by_key(|&(end, _)| end)
        .map(|(_, value)| value)
}

/// Total, deterministic reply parser; rules R1-R4 are tried in order.
pub fn parse_verdict(response_text: &str) -> Verdict {
    if let Some(v) = rule_one(response_text) {
        return v;
    }
    let rationale = response_text.trim().to_string();
    if let Some(value) = rule_two(response_text) {
        return Verdict { value, rationale, matched_rule: MatchedRule::R2 };
    }
    if let Some(value) = rule_three(response_text) {
        return Verdict { value, rationale, matched_rule: MatchedRule::R3 };
    }
    Verdict {
        value: VerdictValue::Abstain,
        rationale,
        matched_rule: MatchedRule::R4,
    }
}

/// How an exact 50/50 split among valid trials is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    Hateful,
    NonHateful,
}

impl std::str::FromStr for TieBreak {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hateful" => Ok(TieBreak::Hateful),
            "non_hateful" => Ok(TieBreak::NonHateful),
            other => Err(format!("unknown tie-break {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggregateError {
    #[error("expected {expected} trial verdicts, got {got}")]
    TrialCountMismatch { expected: usize, got: usize },
    #[error("trial count must be positive")]
    ZeroTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub predicted_label: u8,
    pub score: f64,
    pub low_confidence: bool,
}

pub fn aggregate_trials(verdicts: &[VerdictValue], k: usize, tie_break: TieBreak) -> Result<Aggregate, AggregateError> {
    if k == 0 {
        return Err(AggregateError::ZeroTrials);
    }
    if verdicts.len() != k {
        return Err(AggregateError::TrialCountMismatch { expected: k, got: verdicts.len() });
    }
    let hateful = verdicts.iter().filter(|v| **v == VerdictValue::Hateful).count();
    let valid = verdicts.iter().filter(|v| **v != VerdictValue::Abstain).count();
    if valid == 0 {
        return Ok(Aggregate { predicted_label: 0, score: 0.5, low_confidence: true });
    }
    let score = hateful as f64 / valid as f64;
    // Compare counts rather than the float against 0.5.
    let predicted_label = match (2 * hateful).cmp(&valid) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => match tie_break {
            TieBreak::Hateful => 1,
            TieBreak::NonHateful => 0,
        },
    };
    let low_confidence = valid < k.div_ceil(2) || 2 * hateful == valid;
    Ok(Aggregate { predicted_label, score, low_confidence })
}

/// Settings under which a detection ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSettings {
    pub tier: PromptTier,
    pub k: usize,
    pub use_ocr: bool,
    #[serde(default)]
    pub tie_break: TieBreak,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: u32,
    pub exchange: ChatExchange,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub meme_id: String,
    pub trials: Vec<TrialRecord>,
    pub predicted_label: u8,
    pub score: f64,
    pub low_confidence: bool,
    pub config_snapshot: DetectionSettings,
}

impl DetectionResult {
    pub fn verdict_values(&self) -> Vec<VerdictValue> {
        self.trials.iter().map(|t| t.verdict.value).collect()
    }
}
