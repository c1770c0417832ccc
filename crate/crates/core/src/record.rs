//! Shared record model and the JSONL record format.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::{hash64, FIELD_SEPARATOR};
use crate::textnorm::canonical;

/// Content-addressed id: 16 lowercase hex chars of the hash of the
/// canonical question and answer.
pub fn compute_record_id(question: &str, answer: &str) -> String {
    let mut text = canonical(question);
    text.push(FIELD_SEPARATOR);
    text.push_str(&canonical(answer));
    format!("{:016x}", hash64(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Chatgpt4o,
    Gemini25pro,
    Mock,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Real, Source::Chatgpt4o, Source::Gemini25pro, Source::Mock];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Chatgpt4o => "chatgpt4o",
            Source::Gemini25pro => "gemini25pro",
            Source::Mock => "mock",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        Source::ALL.into_iter().find(|src| src.as_str() == s)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurationState {
    Raw,
    Accepted,
    Rejected,
    Flagged,
}

/// Funnel stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Normalize,
    Langguard,
    Length,
    ExactDup,
    NearDup,
    Semantic,
    Review,
}

impl Stage {
    pub const FUNNEL: [Stage; 7] = [
        Stage::Parse,
        Stage::Normalize,
        Stage::Langguard,
        Stage::Length,
        Stage::ExactDup,
        Stage::NearDup,
        Stage::Semantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Parse => "parse",
            Stage::Normalize => "normalize",
            Stage::Langguard => "langguard",
            Stage::Length => "length",
            Stage::ExactDup => "exact_dup",
            Stage::NearDup => "near_dup",
            Stage::Semantic => "semantic",
            Stage::Review => "review",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::FUNNEL.into_iter().chain([Stage::Review]).find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStatus")]
pub struct CurationStatus {
    pub state: CurationState,
    pub rejected_stage: Option<Stage>,
    pub reason: Option<String>,
}

#[derive(Deserialize)]
struct RawStatus {
    state: CurationState,
    #[serde(default)]
    rejected_stage: Option<Stage>,
    #[serde(default)]
    reason: Option<String>,
}

impl TryFrom<RawStatus> for CurationStatus {
    type Error = String;

    fn try_from(raw: RawStatus) -> Result<Self, Self::Error> {
        let rejected = raw.state == CurationState::Rejected;
        let has_detail = raw.rejected_stage.is_some() && raw.reason.is_some();
        let has_any = raw.rejected_stage.is_some() || raw.reason.is_some();
        if rejected && !has_detail {
            return Err("rejected status requires rejected_stage and reason".into());
        }
        if !rejected && has_any {
            return Err("rejected_stage and reason are only allowed on rejected records".into());
        }
        Ok(CurationStatus {
            state: raw.state,
            rejected_stage: raw.rejected_stage,
            reason: raw.reason,
        })
    }
}

impl CurationStatus {
    pub fn raw() -> Self {
        Self::plain(CurationState::Raw)
    }

    pub fn accepted() -> Self {
        Self::plain(CurationState::Accepted)
    }

    pub fn flagged() -> Self {
        Self::plain(CurationState::Flagged)
    }

    pub fn rejected(stage: Stage, reason: impl Into<String>) -> Self {
        Self {
            state: CurationState::Rejected,
            rejected_stage: Some(stage),
            reason: Some(reason.into()),
        }
    }

    fn plain(state: CurationState) -> Self {
        Self {
            state,
            rejected_stage: None,
            reason: None,
        }
    }
}

fn default_category() -> String {
    "general".to_string()
}

/// One question–answer pair with provenance, curation status and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub source: Source,
    #[serde(default = "default_category")]
    pub category: String,
    #[serde(default)]
    pub template_id: Option<String>,
    #[serde(default)]
    pub seed_ids: Vec<String>,
    pub status: CurationStatus,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub created_at: DateTime<Utc>,
    /// Fields this version does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl QARecord {
    /// A raw record with a computed id, the "general" category and a fixed
    /// epoch timestamp.
    pub fn new(question: &str, answer: &str, source: Source) -> Self {
        Self {
            id: compute_record_id(question, answer),
            question: question.to_string(),
            answer: answer.to_string(),
            source,
            category: default_category(),
            template_id: None,
            seed_ids: Vec::new(),
            status: CurationStatus::raw(),
            metrics: BTreeMap::new(),
            created_at: Utc.timestamp_opt(0, 0).unwrap(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.len() != 16 || !self.id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("id {:?} is not 16 hex chars", self.id));
        }
        if self.source == Source::Real && (self.template_id.is_some() || !self.seed_ids.is_empty()) {
            return Err(format!("real record {} carries generation provenance", self.id));
        }
        if self.status.state == CurationState::Accepted && (self.question.trim().is_empty() || self.answer.trim().is_empty()) {
            return Err(format!("accepted record {} has an empty field", self.id));
        }
        Ok(())
    }

    pub fn reject(&mut self, stage: Stage, reason: impl Into<String>) {
        self.status = CurationStatus::rejected(stage, reason);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub counts: BTreeMap<Source, usize>,
    pub config_digest: String,
    pub split: SplitIds,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<(), String> {
        let total: usize = self.counts.values().sum();
        let train: std::collections::HashSet<&String> = self.split.train.iter().collect();
        if let Some(id) = self.split.val.iter().find(|id| train.contains(id)) {
            return Err(format!("record {id} is in both train and val"));
        }
        let distinct = train.len() + self.split.val.len();
        if total != distinct {
            return Err(format!("counts sum to {total} but the split holds {distinct} ids"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}: duplicate id {id} on lines {first} and {second}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first: usize,
        second: usize,
    },
}

/// Reads any line-delimited JSON file; blank lines are skipped and line
/// numbers are 1-based.
pub fn read_jsonl_values<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = idx + 1;
        let text = if line_no == 1 {
            line.strip_prefix('\u{FEFF}').unwrap_or(&line)
        } else {
            &line
        };
        if text.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(text).map_err(|e| JsonlError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, value));
    }
    Ok(out)
}

pub fn write_jsonl_values<T: Serialize>(items: &[T], path: &Path) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("records always serialize");
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QARecord>, JsonlError> {
    let rows: Vec<(usize, QARecord)> = read_jsonl_values(path)?;
    let mut seen: HashMap<String, usize> = HashMap::with_capacity(rows.len());
    let mut out = Vec::with_capacity(rows.len());
    for (line, record) in rows {
        record.validate().map_err(|message| JsonlError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        })?;
        if let Some(&first) = seen.get(&record.id) {
            return Err(JsonlError::DuplicateId {
                path: path.to_path_buf(),
                id: record.id,
                first,
                second: line,
            });
        }
        seen.insert(record.id.clone(), line);
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl(records: &[QARecord], path: &Path) -> Result<(), JsonlError> {
    write_jsonl_values(records, path)
}
