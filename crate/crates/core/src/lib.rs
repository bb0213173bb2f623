//! Zero-shot hateful meme detection and correction with a vision-language
//! model behind an OpenAI-compatible chat endpoint.
//!
//! - [`dataset`]: Hateful Memes Challenge JSONL splits and images
//! - [`prompt`]: naive / detailed / complete detection prompts and the correction prompt
//! - [`gateway`]: HTTP and record/replay model backends
//! - [`verdict`]: reply parsing and k-trial majority voting
//! - [`detection`]: the k-trial detector
//! - [`metrics`]: accuracy, tie-aware AUROC and evaluation reports
//! - [`correction`]: text rewriting with automatic re-verification
//! - [`pipeline`]: resumable, parallel detection and correction runs

pub mod correction;
pub mod dataset;
pub mod detection;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod verdict;

pub use correction::{CorrectionCandidate, CorrectionStatus, Corrector};
pub use dataset::{MemeRecord, Split, SplitName};
pub use detection::Detector;
pub use gateway::{ChatExchange, FixtureStore, HttpGateway, InferenceConfig, ReplayGateway, VisionGateway};
pub use metrics::EvalReport;
pub use prompt::{PromptText, PromptTier};
pub use verdict::{DetectionResult, Verdict, VerdictValue};
