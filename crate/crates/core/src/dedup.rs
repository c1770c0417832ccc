//! Exact and near-duplicate detection.
//!
//! Exact duplicates share a content id. Near duplicates are found with
//! MinHash signatures over character shingles of the canonical text,
//! bucketed by LSH bands, and then confirmed with the exact Jaccard
//! similarity of the shingle sets, so banding false positives never
//! survive.

use std::collections::{BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{compute_record_id, QARecord};
use crate::textnorm::canonical;

/// Separator placed between question and answer in hashed and deduplicated text.
pub const FIELD_SEPARATOR: char = '\u{241F}';

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn hash64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |state, &b| (state ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DedupError {
    #[error("empty_input: cannot sketch an empty shingle set")]
    EmptyInput,
    #[error("invalid dedup config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupConfig {
    pub shingle_k: usize,
    pub num_perms: usize,
    pub bands: usize,
    pub rows: usize,
    pub jaccard_threshold: f64,
    pub master_seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            shingle_k: 5,
            num_perms: 128,
            bands: 16,
            rows: 8,
            jaccard_threshold: 0.80,
            master_seed: 0x5EED,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), DedupError> {
        if self.shingle_k == 0 {
            return Err(DedupError::InvalidConfig("shingle_k must be at least 1".into()));
        }
        if self.bands * self.rows != self.num_perms {
            return Err(DedupError::InvalidConfig(format!(
                "bands ({}) x rows ({}) must equal num_perms ({})",
                self.bands, self.rows, self.num_perms
            )));
        }
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold <= 1.0) {
            return Err(DedupError::InvalidConfig(format!(
                "jaccard_threshold must be in (0, 1], got {}",
                self.jaccard_threshold
            )));
        }
        Ok(())
    }

    fn permutation_seeds(&self) -> Vec<u64> {
        (0..self.num_perms as u64)
            .map(|j| mix64(self.master_seed.wrapping_add(j)))
            .collect()
    }
}

/// All overlapping character k-grams; text shorter than `k` is its own
/// single shingle.
pub fn shingles(text: &str, k: usize) -> BTreeSet<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < k || k == 0 {
        return BTreeSet::from([text.to_string()]);
    }
    chars.windows(k).map(|w| w.iter().collect()).collect()
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sketch {
    pub signature: Vec<u64>,
    pub shingle_count: usize,
}

impl Sketch {
    /// Fraction of signature slots that agree, the MinHash Jaccard estimate.
    pub fn agreement(&self, other: &Sketch) -> f64 {
        let same = self.signature.iter().zip(&other.signature).filter(|(a, b)| a == b).count();
        same as f64 / self.signature.len() as f64
    }
}

pub fn minhash(shingle_set: &BTreeSet<String>, config: &DedupConfig) -> Result<Sketch, DedupError> {
    let seeds = config.permutation_seeds();
    minhash_with_seeds(shingle_set, &seeds)
}

fn minhash_with_seeds(shingle_set: &BTreeSet<String>, seeds: &[u64]) -> Result<Sketch, DedupError> {
    if shingle_set.is_empty() {
        return Err(DedupError::EmptyInput);
    }
    let mut signature = vec![u64::MAX; seeds.len()];
    for shingle in shingle_set {
        let h = hash64(shingle.as_bytes());
        for (slot, seed) in signature.iter_mut().zip(seeds) {
            let v = mix64(h ^ seed);
            if v < *slot {
                *slot = v;
            }
        }
    }
    Ok(Sketch {
        signature,
        shingle_count: shingle_set.len(),
    })
}

/// Text used for duplicate detection: canonical question and answer joined
/// by [`FIELD_SEPARATOR`].
pub fn dedup_text(question: &str, answer: &str) -> String {
    let mut text = canonical(question);
    text.push(FIELD_SEPARATOR);
    text.push_str(&canonical(answer));
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicateKind {
    Exact,
    Near,
}

/// One line of the duplicate ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub kept_id: String,
    pub removed_id: String,
    pub kind: DuplicateKind,
    pub jaccard: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupOutcome {
    /// Removals in resolution order: exact stage first, then near pairs by
    /// ascending (kept, removed) insertion index.
    pub pairs: Vec<DuplicatePair>,
    /// Surviving records whose canonical question repeats an earlier
    /// survivor's question with a different answer, as (earlier, later).
    pub question_collisions: Vec<(String, String)>,
}

impl DedupOutcome {
    pub fn removed_ids(&self) -> HashSet<&str> {
        self.pairs.iter().map(|p| p.removed_id.as_str()).collect()
    }
}

struct Entry<'a> {
    id: String,
    protected: bool,
    record: &'a QARecord,
}

/// Finds exact and near duplicates among `records` (insertion order is the
/// slice order). Records for which `protected` returns true are never
/// removed.
pub fn find_duplicates(
    records: &[QARecord],
    protected: &(dyn Fn(&QARecord) -> bool + Sync),
    config: &DedupConfig,
) -> Result<DedupOutcome, DedupError> {
    config.validate()?;
    let mut outcome = DedupOutcome::default();

    let entries: Vec<Entry> = records
        .par_iter()
        .map(|r| Entry {
            id: compute_record_id(&r.question, &r.answer),
            protected: protected(r),
            record: r,
        })
        .collect();

    // Exact stage: group by content id, preferring a protected keeper.
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut group_order: Vec<&str> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        groups
            .entry(e.id.as_str())
            .or_insert_with(|| {
                group_order.push(e.id.as_str());
                Vec::new()
            })
            .push(i);
    }
    let mut removed = vec![false; entries.len()];
    for key in &group_order {
        let members = &groups[key];
        if members.len() < 2 {
            continue;
        }
        let keeper = members.iter().copied().find(|&i| entries[i].protected).unwrap_or(members[0]);
        for &i in members {
            if i == keeper || entries[i].protected {
                continue;
            }
            removed[i] = true;
            outcome.pairs.push(DuplicatePair {
                kept_id: entries[keeper].record.id.clone(),
                removed_id: entries[i].record.id.clone(),
                kind: DuplicateKind::Exact,
                jaccard: 1.0,
            });
        }
    }

    // Near stage over exact-stage survivors.
    let survivors: Vec<usize> = (0..entries.len()).filter(|&i| !removed[i]).collect();
    let seeds = config.permutation_seeds();
    let prepared: Vec<(BTreeSet<String>, Sketch)> = survivors
        .par_iter()
        .map(|&i| {
            let r = entries[i].record;
            let set = shingles(&dedup_text(&r.question, &r.answer), config.shingle_k);
            let sketch = minhash_with_seeds(&set, &seeds).expect("shingle sets are never empty");
            (set, sketch)
        })
        .collect();

    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for band in 0..config.bands {
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        let rows = band * config.rows..(band + 1) * config.rows;
        for (pos, (_, sketch)) in prepared.iter().enumerate() {
            let mut bytes = Vec::with_capacity(8 * config.rows);
            for v in &sketch.signature[rows.clone()] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            buckets.entry(hash64(&bytes)).or_default().push(pos);
        }
        for members in buckets.values() {
            for (a, &x) in members.iter().enumerate() {
                for &y in &members[a + 1..] {
                    candidates.insert((x.min(y), x.max(y)));
                }
            }
        }
    }

    let verified: Vec<(usize, usize, f64)> = candidates
        .into_par_iter()
        .filter_map(|(a, b)| {
            let j = jaccard(&prepared[a].0, &prepared[b].0);
            (j >= config.jaccard_threshold).then_some((a, b, j))
        })
        .collect();

    for (a, b, j) in verified {
        let (ia, ib) = (survivors[a], survivors[b]);
        if removed[ia] || removed[ib] {
            continue;
        }
        let (keep, drop) = match (entries[ia].protected, entries[ib].protected) {
            (true, true) => continue,
            (false, true) => (ib, ia),
            _ => (ia, ib),
        };
        removed[drop] = true;
        outcome.pairs.push(DuplicatePair {
            kept_id: entries[keep].record.id.clone(),
            removed_id: entries[drop].record.id.clone(),
            kind: DuplicateKind::Near,
            jaccard: j,
        });
    }

    let mut first_by_question: HashMap<String, usize> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        if removed[i] {
            continue;
        }
        let q = canonical(&e.record.question);
        match first_by_question.get(&q) {
            Some(&first) => outcome
                .question_collisions
                .push((entries[first].record.id.clone(), e.record.id.clone())),
            None => {
                first_by_question.insert(q, i);
            }
        }
    }

    Ok(outcome)
}

/// Probability that a pair with Jaccard `j` shares at least one LSH bucket.
pub fn candidate_probability(j: f64, bands: usize, rows: usize) -> f64 {
    1.0 - (1.0 - j.powi(rows as i32)).powi(bands as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Source;

    fn rec(q: &str, a: &str, source: Source) -> QARecord {
        QARecord::new(q, a, source)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(hash64(b""), 0xcbf29ce484222325);
        // (offset ^ 0x61) * prime, by hand
        let by_hand = (0xcbf29ce484222325u64 ^ 0x61).wrapping_mul(0x100000001b3);
        assert_eq!(by_hand, 0xaf63dc4c8601ec8c);
        assert_eq!(hash64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn shingle_examples() {
        let s = shingles("abcdef", 5);
        assert_eq!(s, BTreeSet::from(["abcde".to_string(), "bcdef".to_string()]));
        assert_eq!(shingles("abc", 5), BTreeSet::from(["abc".to_string()]));
        let j = jaccard(&shingles("abcdef", 5), &shingles("abcdeg", 5));
        assert!((j - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shingles_count_scalars_not_bytes() {
        let s = shingles("اسهال", 5);
        assert_eq!(s.len(), 1);
        assert_eq!(shingles("اسهال شديد", 5).len(), 6);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert_eq!(minhash(&BTreeSet::new(), &DedupConfig::default()), Err(DedupError::EmptyInput));
    }

    #[test]
    fn identical_sets_identical_signatures() {
        let cfg = DedupConfig::default();
        let a = minhash(&shingles("عندي الم في المعده", 5), &cfg).unwrap();
        let b = minhash(&shingles("عندي الم في المعده", 5), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.signature.len(), 128);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DedupConfig::default();
        cfg.bands = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = DedupConfig::default();
        cfg.jaccard_threshold = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn exact_duplicate_of_synthetic() {
        let a = rec("عندي صداع شديد منذ يومين", "اشرب الماء وارتح جيدا", Source::Mock);
        let b = a.clone();
        let out = find_duplicates(&[a.clone(), b], &|_| false, &DedupConfig::default()).unwrap();
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].kind, DuplicateKind::Exact);
        assert_eq!(out.pairs[0].kept_id, a.id);
    }

    #[test]
    fn protected_record_wins_even_when_later() {
        let synth = rec("عندي صداع شديد منذ يومين", "اشرب الماء وارتح جيدا", Source::Chatgpt4o);
        let real = rec("عندي صداع شديد منذ يومين", "اشرب الماء وارتح جيدا", Source::Real);
        let is_real = |r: &QARecord| r.source == Source::Real;
        let out = find_duplicates(&[synth, real.clone()], &is_real, &DedupConfig::default()).unwrap();
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].kept_id, real.id);
    }

    #[test]
    fn near_duplicate_removed_with_jaccard() {
        let a = rec(
            "عندي الم شديد في البطن مع اسهال متكرر منذ ثلاثة ايام",
            "ننصحك بشرب السوائل بكثرة ومراجعة الطبيب اذا استمر الاسهال",
            Source::Chatgpt4o,
        );
        let b = rec(
            "عندي الم شديد في البطن مع اسهال متكرر منذ ثلاثة ايام!",
            "ننصحك بشرب السوائل بكثرة ومراجعة الطبيب اذا استمر الاسهاك",
            Source::Gemini25pro,
        );
        let out = find_duplicates(&[a.clone(), b.clone()], &|_| false, &DedupConfig::default()).unwrap();
        assert_eq!(out.pairs.len(), 1);
        let p = &out.pairs[0];
        assert_eq!((p.kept_id.as_str(), p.removed_id.as_str()), (a.id.as_str(), b.id.as_str()));
        assert_eq!(p.kind, DuplicateKind::Near);
        assert!(p.jaccard >= 0.8 && p.jaccard < 1.0);
    }

    #[test]
    fn same_question_different_answer_is_kept_and_flagged() {
        let a = rec("عندي كحة مستمرة منذ اسبوع", "قد تكون حساسية موسمية ويفضل الفحص", Source::Mock);
        let b = rec(
            "عندي كحة مستمرة منذ اسبوع",
            "اشرب سوائل دافئة وتجنب التدخين والغبار تماما",
            Source::Mock,
        );
        let out = find_duplicates(&[a.clone(), b.clone()], &|_| false, &DedupConfig::default()).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.question_collisions, vec![(a.id, b.id)]);
    }

    #[test]
    fn banding_probability_at_knee() {
        assert!(candidate_probability(0.85, 16, 8) >= 0.97);
        assert!(candidate_probability(0.3, 16, 8) < 0.01);
    }
}
