//! Durable review state: an append-only JSONL event log plus periodic
//! snapshots in a state directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use memeshield_core::correction::CorrectionCandidate;
use serde::{Deserialize, Serialize};

use crate::model::{Batch, BatchSummary, Event, ExpertVerdict, LoggedEvent, ReviewError, ReviewState, TaskView};

pub const EVENT_LOG: &str = "events.jsonl";
pub const SNAPSHOT: &str = "snapshot.json";
const SNAPSHOT_EVERY: u64 = 100;

fn storage<E: std::fmt::Display>(e: E) -> ReviewError {
    ReviewError::Storage(e.to_string())
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    state: ReviewState,
}

struct Inner {
    state: ReviewState,
    log: File,
}

pub struct ReviewStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

/// Reads the event log, dropping a torn final line.
pub fn read_events(path: &Path) -> Result<Vec<LoggedEvent>, ReviewError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(storage(e)),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(storage)?;
    let mut events = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(e) if i + 1 == lines.len() => log::warn!("{}: ignoring torn final event: {e}", path.display()),
            Err(e) => return Err(storage(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(events)
}

impl ReviewStore {
    /// Opens (or initialises) the state directory: loads the latest snapshot
    /// and replays newer events on top of it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ReviewError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(storage)?;
        let log_path = dir.join(EVENT_LOG);
        let events = read_events(&log_path)?;

        let mut state = match fs::read_to_string(dir.join(SNAPSHOT)) {
            Ok(text) => serde_json::from_str::<Snapshot>(&text).map_err(storage)?.state,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ReviewState::default(),
            Err(e) => return Err(storage(e)),
        };
        let snapshot_seq = state.last_seq;
        for e in events.iter().filter(|e| e.seq > snapshot_seq) {
            state.apply(e);
        }

        // Rewrite the log if a torn line was dropped so appends stay parseable.
        let on_disk = fs::read_to_string(&log_path).unwrap_or_default();
        if on_disk.lines().filter(|l| !l.trim().is_empty()).count() != events.len() {
            let mut clean = Vec::new();
            for e in &events {
                serde_json::to_writer(&mut clean, e).map_err(storage)?;
                clean.push(b'\n');
            }
            fs::write(&log_path, clean).map_err(storage)?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(storage)?;
        Ok(Self {
            dir,
            inner: Mutex::new(Inner { state, log }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn commit(&self, inner: &mut Inner, event: Event) -> Result<LoggedEvent, ReviewError> {
        let logged = LoggedEvent {
            seq: inner.state.last_seq + 1,
            at: Utc::now(),
            event,
        };
        let mut line = serde_json::to_vec(&logged).map_err(storage)?;
        line.push(b'\n');
        inner.log.write_all(&line).map_err(storage)?;
        inner.log.sync_data().map_err(storage)?;
        inner.state.apply(&logged);
        if logged.seq.is_multiple_of(SNAPSHOT_EVERY) {
            self.write_snapshot(&inner.state)?;
        }
        Ok(logged)
    }

    fn write_snapshot(&self, state: &ReviewState) -> Result<(), ReviewError> {
        let tmp = self.dir.join(format!("{SNAPSHOT}.tmp"));
        let bytes = serde_json::to_vec(&Snapshot { state: state.clone() }).map_err(storage)?;
        fs::write(&tmp, bytes).map_err(storage)?;
        fs::rename(&tmp, self.dir.join(SNAPSHOT)).map_err(storage)
    }

    pub fn snapshot_now(&self) -> Result<(), ReviewError> {
        let inner = self.inner.lock().unwrap();
        self.write_snapshot(&inner.state)
    }

    pub fn create_batch(
        &self,
        candidates: &[CorrectionCandidate],
        panel: &[String],
        quorum: usize,
    ) -> Result<Batch, ReviewError> {
        let mut inner = self.inner.lock().unwrap();
        let event = inner.state.plan_create(candidates, panel, quorum)?;
        let Event::BatchCreated { batch_id, .. } = &event else { unreachable!() };
        let batch_id = batch_id.clone();
        self.commit(&mut inner, event)?;
        Ok(inner.state.batch(&batch_id)?.clone())
    }

    /// Stores one verdict; validation, logging and application happen under a
    /// single lock so concurrent submissions are linearized.
    pub fn submit_verdict(&self, verdict: ExpertVerdict) -> Result<(), ReviewError> {
        let mut inner = self.inner.lock().unwrap();
        let event = inner.state.plan_verdict(verdict)?;
        if let Event::VerdictSubmitted { verdict, replaced: Some(prev) } = &event {
            log::info!(
                "expert {} overwrote {:?} with {:?} on {}",
                verdict.expert_id, prev, verdict.judgment, verdict.item_id
            );
        }
        self.commit(&mut inner, event)?;
        Ok(())
    }

    pub fn batch(&self, batch_id: &str) -> Result<Batch, ReviewError> {
        self.inner.lock().unwrap().state.batch(batch_id).cloned()
    }

    pub fn batch_summary(&self, batch_id: &str) -> Result<BatchSummary, ReviewError> {
        self.inner.lock().unwrap().state.summary(batch_id)
    }

    pub fn tasks_for(&self, expert_id: &str) -> Vec<TaskView> {
        self.inner.lock().unwrap().state.tasks_for(expert_id)
    }

    pub fn image_path(&self, meme_id: &str) -> Option<PathBuf> {
        self.inner.lock().unwrap().state.image_path(meme_id).cloned()
    }

    pub fn state(&self) -> ReviewState {
        self.inner.lock().unwrap().state.clone()
    }
}
