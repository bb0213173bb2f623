//! Review state as a pure fold over events.
//!
//! Commands are validated against the current state (`plan_*`), turned into
//! events, and applied with [`ReviewState::apply`]. Replaying the same event
//! sequence always rebuilds the same state.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use memeshield_core::correction::CorrectionCandidate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReviewError {
    #[error("quorum must be odd and positive, got {0}")]
    InvalidQuorum(usize),
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("expert {expert:?} is not on the panel for item {item:?}")]
    Forbidden { expert: String, item: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("item {0:?} is already decided")]
    ItemClosed(String),
    #[error("batch {batch:?} has {undecided} undecided items")]
    BatchIncomplete { batch: String, undecided: usize },
    #[error("storage error: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub meme_id: String,
    pub image_path: PathBuf,
    pub original_text: String,
    pub generated_text: String,
    pub status: ItemStatus,
    pub outcome: Option<Judgment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertVerdict {
    pub expert_id: String,
    pub item_id: String,
    pub judgment: Judgment,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub panel: Vec<String>,
    pub quorum: usize,
    pub created_at: DateTime<Utc>,
    pub items: Vec<ReviewItem>,
    /// item_id -> expert_id -> latest verdict
    pub verdicts: BTreeMap<String, BTreeMap<String, ExpertVerdict>>,
}

impl Batch {
    pub fn item(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn decided(&self) -> usize {
        self.items.iter().filter(|i| i.status == ItemStatus::Decided).count()
    }

    pub fn has_expert(&self, expert_id: &str) -> bool {
        self.panel.iter().any(|e| e == expert_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    BatchCreated {
        batch_id: String,
        panel: Vec<String>,
        quorum: usize,
        items: Vec<ReviewItem>,
    },
    VerdictSubmitted {
        verdict: ExpertVerdict,
        /// Judgment this submission overwrote, for the audit trail.
        replaced: Option<Judgment>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch_id: String,
    pub total: usize,
    pub decided: usize,
    pub success_rate: f64,
    /// Fraction of judged items on which each expert agreed with the majority.
    pub per_expert_agreement: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub batch_id: String,
    pub item_id: String,
    pub meme_id: String,
    pub image_url: String,
    pub original_text: String,
    pub generated_text: String,
    pub index: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewState {
    pub batches: BTreeMap<String, Batch>,
    /// item_id -> batch_id
    pub item_index: BTreeMap<String, String>,
    pub last_seq: u64,
}

fn majority(verdicts: &BTreeMap<String, ExpertVerdict>) -> Judgment {
    let success = verdicts.values().filter(|v| v.judgment == Judgment::Success).count();
    if 2 * success > verdicts.len() {
        Judgment::Success
    } else {
        Judgment::Failure
    }
}

impl ReviewState {
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a LoggedEvent>) -> Self {
        let mut state = Self::default();
        for e in events {
            state.apply(e);
        }
        state
    }

    pub fn next_batch_id(&self) -> String {
        format!("b{:04}", self.batches.len() + 1)
    }

    pub fn plan_create(
        &self,
        candidates: &[CorrectionCandidate],
        panel: &[String],
        quorum: usize,
    ) -> Result<Event, ReviewError> {
        if quorum == 0 || quorum.is_multiple_of(2) {
            return Err(ReviewError::InvalidQuorum(quorum));
        }
        if panel.is_empty() {
            return Err(ReviewError::InvalidPanel("panel is empty".into()));
        }
        let mut sorted = panel.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != panel.len() {
            return Err(ReviewError::InvalidPanel("duplicate expert ids".into()));
        }
        if panel.len() < quorum {
            return Err(ReviewError::InvalidPanel(format!(
                "panel of {} cannot reach quorum {quorum}",
                panel.len()
            )));
        }
        if candidates.is_empty() {
            log::warn!("creating an empty review batch");
        }
        let batch_id = self.next_batch_id();
        let items = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| ReviewItem {
                item_id: format!("{batch_id}-{:03}", i + 1),
                meme_id: c.meme_id.clone(),
                image_path: c.image_path.clone(),
                original_text: c.original_text.clone(),
                generated_text: c.generated_text.clone(),
                status: ItemStatus::Pending,
                outcome: None,
            })
            .collect();
        Ok(Event::BatchCreated {
            batch_id,
            panel: panel.to_vec(),
            quorum,
            items,
        })
    }

    pub fn plan_verdict(&self, verdict: ExpertVerdict) -> Result<Event, ReviewError> {
        let batch = self
            .item_index
            .get(&verdict.item_id)
            .and_then(|b| self.batches.get(b))
            .ok_or_else(|| ReviewError::NotFound(format!("item {}", verdict.item_id)))?;
        if !batch.has_expert(&verdict.expert_id) {
            return Err(ReviewError::Forbidden {
                expert: verdict.expert_id,
                item: verdict.item_id,
            });
        }
        let item = batch.item(&verdict.item_id).expect("indexed item exists");
        if item.status == ItemStatus::Decided {
            return Err(ReviewError::ItemClosed(verdict.item_id));
        }
        let replaced = batch
            .verdicts
            .get(&verdict.item_id)
            .and_then(|m| m.get(&verdict.expert_id))
            .map(|v| v.judgment);
        Ok(Event::VerdictSubmitted { verdict, replaced })
    }

    pub fn apply(&mut self, logged: &LoggedEvent) {
        self.last_seq = logged.seq;
        match &logged.event {
            Event::BatchCreated { batch_id, panel, quorum, items } => {
                for item in items {
                    self.item_index.insert(item.item_id.clone(), batch_id.clone());
                }
                self.batches.insert(
                    batch_id.clone(),
                    Batch {
                        batch_id: batch_id.clone(),
                        panel: panel.clone(),
                        quorum: *quorum,
                        created_at: logged.at,
                        items: items.clone(),
                        verdicts: BTreeMap::new(),
                    },
                );
            }
            Event::VerdictSubmitted { verdict, .. } => {
                let Some(batch) = self
                    .item_index
                    .get(&verdict.item_id)
                    .and_then(|b| self.batches.get_mut(b))
                else {
                    return;
                };
                let votes = batch.verdicts.entry(verdict.item_id.clone()).or_default();
                votes.insert(verdict.expert_id.clone(), verdict.clone());
                if votes.len() >= batch.quorum {
                    let outcome = majority(votes);
                    if let Some(item) = batch.items.iter_mut().find(|i| i.item_id == verdict.item_id) {
                        if item.status == ItemStatus::Pending {
                            item.status = ItemStatus::Decided;
                            item.outcome = Some(outcome);
                        }
                    }
                }
            }
        }
    }

    pub fn batch(&self, batch_id: &str) -> Result<&Batch, ReviewError> {
        self.batches
            .get(batch_id)
            .ok_or_else(|| ReviewError::NotFound(format!("batch {batch_id}")))
    }

    pub fn summary(&self, batch_id: &str) -> Result<BatchSummary, ReviewError> {
        let batch = self.batch(batch_id)?;
        let total = batch.items.len();
        let decided = batch.decided();
        if decided < total {
            return Err(ReviewError::BatchIncomplete {
                batch: batch_id.to_string(),
                undecided: total - decided,
            });
        }
        let successes = batch
            .items
            .iter()
            .filter(|i| i.outcome == Some(Judgment::Success))
            .count();
        let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for item in &batch.items {
            let outcome = item.outcome.expect("decided items carry an outcome");
            for v in batch.verdicts.get(&item.item_id).into_iter().flat_map(|m| m.values()) {
                let t = tallies.entry(v.expert_id.clone()).or_default();
                t.1 += 1;
                if v.judgment == outcome {
                    t.0 += 1;
                }
            }
        }
        Ok(BatchSummary {
            batch_id: batch_id.to_string(),
            total,
            decided,
            success_rate: if total == 0 { 0.0 } else { successes as f64 / total as f64 },
            per_expert_agreement: tallies
                .into_iter()
                .map(|(e, (agree, judged))| (e, agree as f64 / judged as f64))
                .collect(),
        })
    }

    /// Pending items the expert has not judged yet, oldest batch first.
    /// Peer verdicts are never part of a task.
    pub fn tasks_for(&self, expert_id: &str) -> Vec<TaskView> {
        let mut batches: Vec<&Batch> = self.batches.values().filter(|b| b.has_expert(expert_id)).collect();
        batches.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.batch_id.cmp(&b.batch_id)));
        let pending: Vec<(&Batch, &ReviewItem)> = batches
            .into_iter()
            .flat_map(|b| b.items.iter().map(move |i| (b, i)))
            .filter(|(b, i)| {
                i.status == ItemStatus::Pending
                    && !b.verdicts.get(&i.item_id).is_some_and(|m| m.contains_key(expert_id))
            })
            .collect();
        let total = pending.len();
        pending
            .into_iter()
            .enumerate()
            .map(|(idx, (b, i))| TaskView {
                batch_id: b.batch_id.clone(),
                item_id: i.item_id.clone(),
                meme_id: i.meme_id.clone(),
                image_url: format!("/images/{}", i.meme_id),
                original_text: i.original_text.clone(),
                generated_text: i.generated_text.clone(),
                index: idx + 1,
                total,
            })
            .collect()
    }

    pub fn image_path(&self, meme_id: &str) -> Option<&PathBuf> {
        self.batches
            .values()
            .flat_map(|b| b.items.iter())
            .find(|i| i.meme_id == meme_id)
            .map(|i| &i.image_path)
    }
}
