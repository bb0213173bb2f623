//! Materializes the hand-authored replay script into request digests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use memeshield_core::dataset::{load_split, resolve_image, SplitName};
use memeshield_core::gateway::{ChatRequest, FixtureStore, InferenceConfig, RequestDigest};
use memeshield_core::prompt::{build_correction_prompt, build_detection_prompt, PromptTier};
use memeshield_core::verdict::{MatchedRule, VerdictValue};
use serde::Deserialize;

/// Shared by every crate in the workspace, so resolve via the sibling `core` dir.
pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn data_root() -> PathBuf {
    fixtures_dir().join("hmc")
}

pub fn replay_dir() -> PathBuf {
    fixtures_dir().join("replay")
}

pub const SPLIT: SplitName = SplitName::DevSeen;

#[derive(Debug, Deserialize)]
pub struct Script {
    pub model_id: String,
    pub trials: usize,
    pub detection: Vec<DetectionEntry>,
    pub correction: Vec<CorrectionEntry>,
    pub verification: Vec<VerificationEntry>,
}

#[derive(Debug, Deserialize)]
pub struct DetectionEntry {
    pub meme_id: String,
    pub use_ocr: bool,
    pub trial: u32,
    pub expect: VerdictValue,
    pub expect_rule: MatchedRule,
    pub response: String,
}

#[derive(Debug, Deserialize)]
pub struct CorrectionEntry {
    pub meme_id: String,
    pub attempt: u32,
    pub response: String,
}

#[derive(Debug, Deserialize)]
pub struct VerificationEntry {
    pub meme_id: String,
    pub new_text: String,
    pub trial: u32,
    pub expect: VerdictValue,
    pub expect_rule: MatchedRule,
    pub response: String,
}

pub fn load_script() -> Script {
    let text = std::fs::read_to_string(fixtures_dir().join("replay_script.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn inference(script: &Script) -> InferenceConfig {
    InferenceConfig { model_id: script.model_id.clone(), ..Default::default() }
}

/// (digest, response) for every scripted exchange.
pub fn materialize(script: &Script) -> Vec<(RequestDigest, String)> {
    let root = data_root();
    let split = load_split(&root, SPLIT).unwrap();
    let cfg = inference(script);
    let image_of = |id: &str| resolve_image(split.get(id).unwrap(), &root).unwrap();
    let mut out = Vec::new();
    for e in &script.detection {
        let record = split.get(&e.meme_id).unwrap();
        let ocr = e.use_ocr.then_some(record.text.as_str());
        let prompt = build_detection_prompt(PromptTier::Complete, ocr).unwrap();
        let image = image_of(&e.meme_id);
        let req = ChatRequest { prompt: &prompt, image: &image, config: &cfg, trial_index: e.trial };
        out.push((req.digest(), e.response.clone()));
    }
    let correction_prompt = build_correction_prompt();
    for e in &script.correction {
        let image = image_of(&e.meme_id);
        let req = ChatRequest { prompt: &correction_prompt, image: &image, config: &cfg, trial_index: e.attempt };
        out.push((req.digest(), e.response.clone()));
    }
    for e in &script.verification {
        let prompt = build_detection_prompt(PromptTier::Complete, Some(&e.new_text)).unwrap();
        let image = image_of(&e.meme_id);
        let req = ChatRequest { prompt: &prompt, image: &image, config: &cfg, trial_index: e.trial };
        out.push((req.digest(), e.response.clone()));
    }
    out
}

pub fn write_store(script: &Script, dir: &Path) -> FixtureStore {
    let store = FixtureStore::new(dir);
    for (digest, response) in materialize(script) {
        store.put(&digest, &response).unwrap();
    }
    store
}
