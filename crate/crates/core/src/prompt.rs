//! Detection and correction prompts.
//!
//! Templates are plain-text assets under `templates/<version>/` with
//! `{{name}}` placeholders. Rendering is a single left-to-right pass, so
//! substituted values (OCR text in particular) are never re-scanned for
//! placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TEMPLATE_VERSION: &str = "v1";

mod assets {
    macro_rules! asset {
        ($name:literal) => {
            include_str!(concat!("../templates/v1/", $name))
        };
    }
    pub const SYSTEM_DETECTION: &str = asset!("system_detection.txt");
    pub const SYSTEM_CORRECTION: &str = asset!("system_correction.txt");
    pub const NAIVE: &str = asset!("naive.txt");
    pub const DETAILED: &str = asset!("detailed.txt");
    pub const COMPLETE: &str = asset!("complete.txt");
    pub const DETECTION_CONTRACT: &str = asset!("detection_contract.txt");
    pub const OCR_BLOCK: &str = asset!("ocr_block.txt");
    pub const CORRECTION: &str = asset!("correction.txt");
    pub const CORRECTION_CONTRACT: &str = asset!("correction_contract.txt");
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("OCR text is empty after trimming")]
    EmptyOcr,
    #[error("template references unknown placeholder {{{{{0}}}}}")]
    UnknownPlaceholder(String),
    #[error("unterminated placeholder in template")]
    Unterminated,
    #[error("unknown prompt tier {0:?}")]
    UnknownTier(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTier {
    Naive,
    Detailed,
    Complete,
}

impl PromptTier {
    pub const ALL: [PromptTier; 3] = [PromptTier::Naive, PromptTier::Detailed, PromptTier::Complete];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptTier::Naive => "naive",
            PromptTier::Detailed => "detailed",
            PromptTier::Complete => "complete",
        }
    }

    fn template(self) -> &'static str {
        match self {
            PromptTier::Naive => assets::NAIVE,
            PromptTier::Detailed => assets::DETAILED,
            PromptTier::Complete => assets::COMPLETE,
        }
    }
}

impl fmt::Display for PromptTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptTier {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptTier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTier(s.to_string()))
    }
}

/// Mandatory building blocks of a detection prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    VisualDescription,
    EmbeddedText,
    HatefulnessDefinition,
    ClassificationCriteria,
    OutputContract,
}

impl Section {
    pub const ALL: [Section; 5] = [
        Section::VisualDescription,
        Section::EmbeddedText,
        Section::HatefulnessDefinition,
        Section::ClassificationCriteria,
        Section::OutputContract,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Section::VisualDescription => "[Visual content]",
            Section::EmbeddedText => "[Embedded text]",
            Section::HatefulnessDefinition => "[Hatefulness definition]",
            Section::ClassificationCriteria => "[Classification criteria]",
            Section::OutputContract => "[Output format]",
        }
    }
}

pub const OCR_OPEN: &str = "<<<";
pub const OCR_CLOSE: &str = ">>>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub system: String,
    pub user: String,
    /// Required final-line format; empty when the tier asks for none.
    pub output_contract: String,
    pub ocr_injected: bool,
}

impl PromptText {
    /// Sections whose header appears in the user text.
    pub fn sections(&self) -> Vec<Section> {
        Section::ALL
            .into_iter()
            .filter(|s| self.user.lines().any(|l| l.trim() == s.header()))
            .collect()
    }

    /// Text between the OCR delimiters, if a block was injected.
    pub fn injected_ocr(&self) -> Option<&str> {
        let start = self.user.find(&format!("{OCR_OPEN}\n"))? + OCR_OPEN.len() + 1;
        let end = self.user.rfind(&format!("\n{OCR_CLOSE}"))?;
        (start <= end).then(|| &self.user[start..end])
    }

    /// Hex SHA-256 over the rendered system and user text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Single-pass `{{name}}` substitution.
pub fn render(template: &str, vars: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or(PromptError::Unterminated)?;
        let name = after[..close].trim();
        let value = vars
            .get(name)
            .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn asset_text(asset: &str) -> &str {
    asset.trim_end_matches('\n')
}

pub fn build_detection_prompt(tier: PromptTier, ocr_text: Option<&str>) -> Result<PromptText, PromptError> {
    let ocr_block = match ocr_text {
        Some(text) if text.trim().is_empty() => return Err(PromptError::EmptyOcr),
        Some(text) => {
            let vars = BTreeMap::from([("ocr_text", text)]);
            render(asset_text(assets::OCR_BLOCK), &vars)?
        }
        None => String::new(),
    };
    let contract = match tier {
        PromptTier::Complete => asset_text(assets::DETECTION_CONTRACT),
        _ => "",
    };
    let vars = BTreeMap::from([("ocr_block", ocr_block.as_str()), ("output_contract", contract)]);
    let user = render(tier.template(), &vars)?.trim_end().to_string();
    Ok(PromptText {
        system: asset_text(assets::SYSTEM_DETECTION).to_string(),
        user,
        output_contract: contract.to_string(),
        ocr_injected: ocr_text.is_some(),
    })
}

pub fn build_correction_prompt() -> PromptText {
    let contract = asset_text(assets::CORRECTION_CONTRACT);
    let vars = BTreeMap::from([("output_contract", contract)]);
    let user = render(assets::CORRECTION, &vars)
        .expect("correction template placeholders are fixed")
        .trim_end()
        .to_string();
    PromptText {
        system: asset_text(assets::SYSTEM_CORRECTION).to_string(),
        user,
        output_contract: contract.to_string(),
        ocr_injected: false,
    }
}

/// Hash identifying the template set used for a detection configuration,
/// independent of any per-meme OCR text.
pub fn detection_template_hash(tier: PromptTier, use_ocr: bool) -> String {
    let mut h = Sha256::new();
    h.update(TEMPLATE_VERSION.as_bytes());
    for part in [
        assets::SYSTEM_DETECTION,
        tier.template(),
        if tier == PromptTier::Complete { assets::DETECTION_CONTRACT } else { "" },
        if use_ocr { assets::OCR_BLOCK } else { "" },
    ] {
        h.update([0u8]);
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn correction_template_hash() -> String {
    build_correction_prompt().hash()
}
