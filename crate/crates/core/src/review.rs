//! Human review verdicts and the state derived from the verdict log.
//!
//! The log is append-only; every derived view (progress, tallies, the set
//! of rejected records) is a fold over it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{read_jsonl_values, JsonlError, QARecord, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictKind {
    Accept,
    Reject,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub record_id: String,
    pub reviewer: String,
    pub fluency: u8,
    pub relevance: u8,
    pub plausibility: u8,
    pub verdict: VerdictKind,
    #[serde(default)]
    pub notes: Option<String>,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("{field} must be between 1 and 5, got {value}")]
    RatingOutOfRange { field: &'static str, value: u8 },
    #[error("a reject verdict requires non-empty notes")]
    RejectWithoutNotes,
    #[error("reviewer name must not be empty")]
    MissingReviewer,
    #[error("record {0} is not in the active review sample")]
    UnknownRecord(String),
    #[error("reviewer {reviewer} already submitted a verdict for {record_id}")]
    Duplicate { record_id: String, reviewer: String },
}

impl ReviewVerdict {
    pub fn validate(&self) -> Result<(), VerdictError> {
        if self.reviewer.trim().is_empty() {
            return Err(VerdictError::MissingReviewer);
        }
        for (field, value) in [
            ("fluency", self.fluency),
            ("relevance", self.relevance),
            ("plausibility", self.plausibility),
        ] {
            if !(1..=5).contains(&value) {
                return Err(VerdictError::RatingOutOfRange { field, value });
            }
        }
        let has_notes = self.notes.as_deref().is_some_and(|n| !n.trim().is_empty());
        if self.verdict == VerdictKind::Reject && !has_notes {
            return Err(VerdictError::RejectWithoutNotes);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RatingMeans {
    pub count: usize,
    pub fluency: f64,
    pub relevance: f64,
    pub plausibility: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub accept: usize,
    pub reject: usize,
    pub flag: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total: usize,
    pub reviewed: usize,
    pub remaining: usize,
    pub verdicts: VerdictCounts,
    pub mean_ratings: BTreeMap<Source, RatingMeans>,
}

#[derive(Debug, Clone, Copy, Default)]
struct RatingSums {
    count: usize,
    fluency: u64,
    relevance: u64,
    plausibility: u64,
}

/// Review progress over a fixed sample.
#[derive(Debug, Clone)]
pub struct ReviewState {
    sample: Vec<QARecord>,
    position: HashMap<String, usize>,
    reviews_per_record: usize,
    verdicts: Vec<ReviewVerdict>,
    keys: HashSet<(String, String)>,
    per_record: Vec<usize>,
    counts: VerdictCounts,
    sums: BTreeMap<Source, RatingSums>,
}

impl ReviewState {
    /// `reviews_per_record` is 1 for single review, 2 for dual review.
    pub fn new(sample: Vec<QARecord>, reviews_per_record: usize) -> Self {
        let position = sample.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        let per_record = vec![0; sample.len()];
        Self {
            sample,
            position,
            reviews_per_record: reviews_per_record.max(1),
            verdicts: Vec::new(),
            keys: HashSet::new(),
            per_record,
            counts: VerdictCounts::default(),
            sums: BTreeMap::new(),
        }
    }

    /// Replays a verdict log.
    pub fn fold(
        sample: Vec<QARecord>,
        reviews_per_record: usize,
        verdicts: impl IntoIterator<Item = ReviewVerdict>,
    ) -> Result<Self, VerdictError> {
        let mut state = Self::new(sample, reviews_per_record);
        for v in verdicts {
            state.apply(v)?;
        }
        Ok(state)
    }

    /// Checks `verdict` against the state without applying it.
    pub fn check(&self, verdict: &ReviewVerdict) -> Result<(), VerdictError> {
        verdict.validate()?;
        if !self.position.contains_key(&verdict.record_id) {
            return Err(VerdictError::UnknownRecord(verdict.record_id.clone()));
        }
        if self.keys.contains(&(verdict.record_id.clone(), verdict.reviewer.clone())) {
            return Err(VerdictError::Duplicate {
                record_id: verdict.record_id.clone(),
                reviewer: verdict.reviewer.clone(),
            });
        }
        Ok(())
    }

    pub fn apply(&mut self, verdict: ReviewVerdict) -> Result<(), VerdictError> {
        self.check(&verdict)?;
        let pos = self.position[&verdict.record_id];
        self.per_record[pos] += 1;
        self.keys.insert((verdict.record_id.clone(), verdict.reviewer.clone()));
        match verdict.verdict {
            VerdictKind::Accept => self.counts.accept += 1,
            VerdictKind::Reject => self.counts.reject += 1,
            VerdictKind::Flag => self.counts.flag += 1,
        }
        let sums = self.sums.entry(self.sample[pos].source).or_default();
        sums.count += 1;
        sums.fluency += u64::from(verdict.fluency);
        sums.relevance += u64::from(verdict.relevance);
        sums.plausibility += u64::from(verdict.plausibility);
        self.verdicts.push(verdict);
        Ok(())
    }

    pub fn sample(&self) -> &[QARecord] {
        &self.sample
    }

    pub fn record(&self, id: &str) -> Option<&QARecord> {
        self.position.get(id).map(|&i| &self.sample[i])
    }

    pub fn verdicts(&self) -> &[ReviewVerdict] {
        &self.verdicts
    }

    fn is_complete(&self, pos: usize) -> bool {
        self.per_record[pos] >= self.reviews_per_record
    }

    pub fn has_reviewed(&self, record_id: &str, reviewer: &str) -> bool {
        self.keys.contains(&(record_id.to_string(), reviewer.to_string()))
    }

    /// Whether `reviewer` may still review `record_id`.
    pub fn is_open_for(&self, record_id: &str, reviewer: &str) -> bool {
        self.position
            .get(record_id)
            .is_some_and(|&p| !self.is_complete(p) && !self.has_reviewed(record_id, reviewer))
    }

    /// First record in sample order that `reviewer` may review and that is
    /// not held by another reviewer (`held` counts current holders).
    pub fn next_open(&self, reviewer: &str, held: &HashMap<String, usize>) -> Option<&QARecord> {
        self.sample.iter().enumerate().find_map(|(pos, r)| {
            let holders = held.get(&r.id).copied().unwrap_or(0);
            let open =
                !self.is_complete(pos) && !self.has_reviewed(&r.id, reviewer) && self.per_record[pos] + holders < self.reviews_per_record;
            open.then_some(r)
        })
    }

    pub fn stats(&self) -> ReviewStats {
        let reviewed = (0..self.sample.len()).filter(|&p| self.is_complete(p)).count();
        let mean_ratings = self
            .sums
            .iter()
            .map(|(&src, s)| {
                let n = s.count as f64;
                (
                    src,
                    RatingMeans {
                        count: s.count,
                        fluency: s.fluency as f64 / n,
                        relevance: s.relevance as f64 / n,
                        plausibility: s.plausibility as f64 / n,
                    },
                )
            })
            .collect();
        ReviewStats {
            total: self.sample.len(),
            reviewed,
            remaining: self.sample.len() - reviewed,
            verdicts: self.counts.clone(),
            mean_ratings,
        }
    }
}

pub fn read_verdicts(path: &Path) -> Result<Vec<ReviewVerdict>, JsonlError> {
    Ok(read_jsonl_values(path)?.into_iter().map(|(_, v)| v).collect())
}

/// Ids of records that received at least one reject verdict.
pub fn rejected_record_ids(verdicts: &[ReviewVerdict]) -> HashSet<String> {
    verdicts
        .iter()
        .filter(|v| v.verdict == VerdictKind::Reject)
        .map(|v| v.record_id.clone())
        .collect()
}
