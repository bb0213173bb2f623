//! Independent expert review of meme corrections.
//!
//! Experts judge each rewritten meme as a success or failure without seeing
//! each other's verdicts. Once an item has `quorum` distinct verdicts its
//! outcome is the majority. All state changes are events in an append-only
//! log, so the service can be rebuilt from disk at any time.

pub mod api;
pub mod model;
pub mod store;

pub use api::{router, AppState, AuthConfig};
pub use model::{BatchSummary, ExpertVerdict, Judgment, ReviewError, ReviewItem, ReviewState};
pub use store::ReviewStore;
