//! Hateful Memes Challenge data: JSONL split loading, image resolution and
//! the hateful subset used by correction.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("split file not found: {0}")]
    DatasetNotFound(PathBuf),
    #[error("{path}:{line}: {message}")]
    ParseError {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate meme id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("image not found: {0}")]
    ImageNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedImage(PathBuf),
    #[error("meme {0:?} has no gold label")]
    MissingLabel(String),
    #[error("unknown split name {0:?}")]
    UnknownSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The five official HMC splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    DevSeen,
    TestSeen,
    DevUnseen,
    TestUnseen,
}

impl SplitName {
    pub const ALL: [SplitName; 5] = [
        SplitName::Train,
        SplitName::DevSeen,
        SplitName::TestSeen,
        SplitName::DevUnseen,
        SplitName::TestUnseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::DevSeen => "dev_seen",
            SplitName::TestSeen => "test_seen",
            SplitName::DevUnseen => "dev_unseen",
            SplitName::TestUnseen => "test_unseen",
        }
    }

    /// Record count of the official release.
    pub fn expected_count(self) -> usize {
        match self {
            SplitName::Train => 8500,
            SplitName::DevSeen => 500,
            SplitName::TestSeen => 1000,
            SplitName::DevUnseen => 1000,
            SplitName::TestUnseen => 2000,
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }

    pub fn is_unseen(self) -> bool {
        matches!(self, SplitName::DevUnseen | SplitName::TestUnseen)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| DatasetError::UnknownSplit(s.to_string()))
    }
}

/// One meme: the image lives at `image_path`, the overlaid text (used as OCR
/// text) in `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeRecord {
    #[serde(deserialize_with = "id_from_string_or_int")]
    pub id: String,
    #[serde(rename = "img")]
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub text: String,
}

fn id_from_string_or_int<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum RawId {
        Str(String),
        Int(u64),
    }
    Ok(match RawId::deserialize(d)? {
        RawId::Str(s) => s,
        RawId::Int(n) => n.to_string(),
    })
}

impl MemeRecord {
    pub fn is_hateful(&self) -> Option<bool> {
        self.label.map(|l| l == 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub records: Vec<MemeRecord>,
    /// Non-fatal load diagnostics (count mismatches).
    pub warnings: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MemeRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    /// Records whose image file does not exist under `root`.
    pub fn missing_images(&self, root: &Path) -> Vec<&MemeRecord> {
        self.records
            .iter()
            .filter(|r| !root.join(&r.image_path).is_file())
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_split(root: &Path, split: SplitName) -> Result<Split, DatasetError> {
    load_split_file(&root.join(split.file_name()), split)
}

pub fn load_split_file(path: &Path, split: SplitName) -> Result<Split, DatasetError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DatasetError::DatasetNotFound(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let records = parse_records(BufReader::new(file), path)?;

    let mut warnings = Vec::new();
    if records.len() != split.expected_count() {
        let msg = format!(
            "{split}: loaded {} records, official release has {}",
            records.len(),
            split.expected_count()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Split {
        name: split,
        records,
        warnings,
    })
}

fn parse_records<R: BufRead>(reader: R, path: &Path) -> Result<Vec<MemeRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::ParseError {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: MemeRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if record.id.is_empty() {
            return Err(parse_err("empty id".into()));
        }
        if let Some(label) = record.label {
            if label > 1 {
                return Err(parse_err(format!("label must be 0 or 1, got {label}")));
            }
        }
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: record.id,
                line: line_no,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Raw image bytes with the mime type sniffed from the content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub bytes: Vec<u8>,
    pub mime: &'static str,
}

const PNG_MAGIC: &[u8] = &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
const JPEG_MAGIC: &[u8] = &[0xFF, 0xD8, 0xFF];

pub fn sniff_mime(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(PNG_MAGIC) {
        Some("image/png")
    } else if bytes.starts_with(JPEG_MAGIC) {
        Some("image/jpeg")
    } else {
        None
    }
}

pub fn resolve_image(record: &MemeRecord, root: &Path) -> Result<ImageData, DatasetError> {
    read_image(&root.join(&record.image_path))
}

pub fn read_image(path: &Path) -> Result<ImageData, DatasetError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DatasetError::ImageNotFound(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let mime = sniff_mime(&bytes).ok_or_else(|| DatasetError::UnsupportedImage(path.to_path_buf()))?;
    Ok(ImageData { bytes, mime })
}

/// The hateful subset of a labeled split, in file order.
pub fn filter_hateful(split: &Split) -> Result<Vec<MemeRecord>, DatasetError> {
    if let Some(unlabeled) = split.records.iter().find(|r| r.label.is_none()) {
        return Err(DatasetError::MissingLabel(unlabeled.id.clone()));
    }
    Ok(split
        .records
        .iter()
        .filter(|r| r.label == Some(1))
        .cloned()
        .collect())
}
