//! The detector: prompt, k sampled trials, parse, vote.

use std::sync::Arc;

use thiserror::Error;

use crate::dataset::ImageData;
use crate::gateway::{ChatRequest, GatewayError, RequestDigest, VisionGateway};
use crate::prompt::{build_detection_prompt, PromptError};
use crate::verdict::{aggregate_trials, parse_verdict, AggregateError, DetectionResult, DetectionSettings, TrialRecord};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("trial {trial}: {source}")]
    Gateway {
        trial: u32,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Clone)]
pub struct Detector {
    gateway: Arc<dyn VisionGateway>,
    settings: DetectionSettings,
}

impl Detector {
    pub fn new(gateway: Arc<dyn VisionGateway>, settings: DetectionSettings) -> Self {
        Self { gateway, settings }
    }

    pub fn settings(&self) -> &DetectionSettings {
        &self.settings
    }

    pub fn gateway(&self) -> &Arc<dyn VisionGateway> {
        &self.gateway
    }

    /// Runs the k trials sequentially. `ocr_text` is injected only when the
    /// settings ask for OCR.
    pub fn detect(&self, meme_id: &str, image: &ImageData, ocr_text: &str) -> Result<DetectionResult, DetectError> {
        let ocr = self.settings.use_ocr.then_some(ocr_text);
        let prompt = build_detection_prompt(self.settings.tier, ocr)?;
        let mut trials = Vec::with_capacity(self.settings.k);
        for trial_index in 0..self.settings.k as u32 {
            let request = ChatRequest {
                prompt: &prompt,
                image,
                config: &self.settings.inference,
                trial_index,
            };
            let exchange = self
                .gateway
                .complete(request)
                .map_err(|source| DetectError::Gateway { trial: trial_index, source })?;
            let verdict = parse_verdict(&exchange.response_text);
            log::debug!(
                "meme {meme_id} trial {trial_index}: {:?} via {}",
                verdict.value,
                verdict.matched_rule
            );
            trials.push(TrialRecord { trial_index, exchange, verdict });
        }
        let values: Vec<_> = trials.iter().map(|t| t.verdict.value).collect();
        let agg = aggregate_trials(&values, self.settings.k, self.settings.tie_break)?;
        Ok(DetectionResult {
            meme_id: meme_id.to_string(),
            trials,
            predicted_label: agg.predicted_label,
            score: agg.score,
            low_confidence: agg.low_confidence,
            config_snapshot: self.settings.clone(),
        })
    }
}

/// Digests of the k requests [`Detector::detect`] sends for one meme.
pub fn request_digests(
    settings: &DetectionSettings,
    image: &ImageData,
    ocr_text: &str,
) -> Result<Vec<RequestDigest>, PromptError> {
    let prompt = build_detection_prompt(settings.tier, settings.use_ocr.then_some(ocr_text))?;
    Ok((0..settings.k as u32)
        .map(|trial_index| {
            ChatRequest { prompt: &prompt, image, config: &settings.inference, trial_index }.digest()
        })
        .collect())
}
