//! Merging real and synthetic records, stratified splits, review sampling
//! and the files handed to a trainer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::{dedup_text, find_duplicates, hash64, mix64, DedupConfig, DedupError, DuplicateKind, DuplicatePair};
use crate::record::{write_jsonl, CorpusManifest, JsonlError, QARecord, Source, SplitIds};

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("id {id} names different content in the real and synthetic sets")]
    IdCollision { id: String },
    #[error("record {id} in the {set} set has source {found}")]
    WrongSubset { id: String, set: &'static str, found: Source },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AssembleError + '_ {
    move |source| AssembleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStrategy {
    PerEpoch,
}

/// Trainer hyperparameters carried into `training_manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingParams {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: u32,
    pub epochs: u32,
    pub batch_size: u32,
    pub mixed_precision: bool,
    pub eval_strategy: EvalStrategy,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            schedule: Schedule::CosineDecay,
            warmup_steps: 200,
            epochs: 3,
            batch_size: 8,
            mixed_precision: true,
            eval_strategy: EvalStrategy::PerEpoch,
        }
    }
}

impl TrainingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(3..=5).contains(&self.epochs) {
            return Err(format!("epochs must be within 3..=5, got {}", self.epochs));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: u32,
    pub epochs: u32,
    pub batch_size: u32,
    pub mixed_precision: bool,
    pub eval_strategy: EvalStrategy,
    pub train_path: String,
    pub val_path: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviewSampleConfig {
    pub n_total: usize,
    pub per_source: BTreeMap<Source, usize>,
}

impl Default for ReviewSampleConfig {
    fn default() -> Self {
        Self {
            n_total: 500,
            per_source: BTreeMap::from([(Source::Chatgpt4o, 250), (Source::Gemini25pro, 250)]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssembleConfig {
    /// Fraction of each stratum that goes to train.
    pub train_ratio: f64,
    pub review: ReviewSampleConfig,
    pub training: TrainingParams,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        Self {
            train_ratio: 0.95,
            review: ReviewSampleConfig::default(),
            training: TrainingParams::default(),
        }
    }
}

impl AssembleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(format!("train_ratio must be in (0, 1), got {}", self.train_ratio));
        }
        let sum: usize = self.review.per_source.values().sum();
        if sum != self.review.n_total {
            return Err(format!("review quotas sum to {sum}, expected n_total {}", self.review.n_total));
        }
        self.training.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub records: Vec<QARecord>,
    pub dropped: Vec<DuplicatePair>,
    pub counts: BTreeMap<Source, usize>,
}

/// Merges the real set with curated synthetic records. Real records are
/// never removed; a synthetic record that duplicates a real one, or an
/// earlier synthetic one, is dropped.
pub fn merge_and_protect(real: &[QARecord], synthetic: &[QARecord], dedup: &DedupConfig) -> Result<Merged, AssembleError> {
    if let Some(r) = real.iter().find(|r| r.source != Source::Real) {
        return Err(AssembleError::WrongSubset {
            id: r.id.clone(),
            set: "real",
            found: r.source,
        });
    }
    if let Some(r) = synthetic.iter().find(|r| r.source == Source::Real) {
        return Err(AssembleError::WrongSubset {
            id: r.id.clone(),
            set: "synthetic",
            found: r.source,
        });
    }

    let mut content: HashMap<&str, String> = HashMap::with_capacity(real.len());
    for r in real {
        content.insert(r.id.as_str(), dedup_text(&r.question, &r.answer));
    }
    let mut dropped = Vec::new();
    let mut unique: Vec<&QARecord> = Vec::with_capacity(synthetic.len());
    let mut seen_synth: HashSet<&str> = HashSet::new();
    for s in synthetic {
        if let Some(text) = content.get(s.id.as_str()) {
            if *text != dedup_text(&s.question, &s.answer) {
                return Err(AssembleError::IdCollision { id: s.id.clone() });
            }
            dropped.push(DuplicatePair {
                kept_id: s.id.clone(),
                removed_id: s.id.clone(),
                kind: DuplicateKind::Exact,
                jaccard: 1.0,
            });
            continue;
        }
        if seen_synth.insert(s.id.as_str()) {
            unique.push(s);
        } else {
            dropped.push(DuplicatePair {
                kept_id: s.id.clone(),
                removed_id: s.id.clone(),
                kind: DuplicateKind::Exact,
                jaccard: 1.0,
            });
        }
    }

    let mut all: Vec<QARecord> = real.to_vec();
    all.extend(unique.into_iter().cloned());
    let outcome = find_duplicates(&all, &|r: &QARecord| r.source == Source::Real, dedup)?;
    let removed = outcome.removed_ids();
    let records: Vec<QARecord> = all.iter().filter(|r| !removed.contains(r.id.as_str())).cloned().collect();
    dropped.extend(outcome.pairs);

    let mut counts = BTreeMap::new();
    for r in &records {
        *counts.entry(r.source).or_insert(0) += 1;
    }
    Ok(Merged { records, dropped, counts })
}

/// Records with any review verdict of `reject` are removed.
pub fn drop_rejected(records: Vec<QARecord>, rejected: &HashSet<String>) -> Vec<QARecord> {
    records.into_iter().filter(|r| !rejected.contains(&r.id)).collect()
}

fn stratum_key(r: &QARecord) -> (Source, String) {
    (r.source, r.category.clone())
}

/// Train counts per stratum. Each stratum gets floor(ratio·n) plus at most
/// one extra record, handed out by largest remainder until the global total
/// reaches round(ratio·N). Ties go to the earlier stratum. Strata of one
/// record always go to train.
pub fn train_quotas(sizes: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = ((ratio * total as f64) + 0.5 + 1e-9).floor() as usize;
    let mut quotas: Vec<usize> = sizes.iter().map(|&n| ((ratio * n as f64) + 1e-9).floor() as usize).collect();
    let mut order: Vec<(f64, usize)> = sizes
        .iter()
        .zip(&quotas)
        .enumerate()
        .map(|(i, (&n, &q))| (ratio * n as f64 - q as f64, i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned: usize = quotas.iter().sum();
    for (_, i) in order {
        if assigned >= target {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            assigned += 1;
        }
    }
    for (q, &n) in quotas.iter_mut().zip(sizes) {
        if n == 1 {
            *q = 1;
        }
    }
    quotas
}

/// Stratified split by (source, category). Within a stratum the members are
/// shuffled by a generator seeded from `seed` and the stratum key. Both
/// outputs keep the corpus order.
pub fn split(corpus: &[QARecord], ratio: f64, seed: u64) -> Result<SplitIds, AssembleError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AssembleError::Config(format!("ratio must be in (0, 1), got {ratio}")));
    }
    let mut strata: BTreeMap<(Source, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.iter().enumerate() {
        strata.entry(stratum_key(r)).or_default().push(i);
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let quotas = train_quotas(&sizes, ratio);

    let mut in_train = vec![false; corpus.len()];
    for (((source, category), members), quota) in strata.iter().zip(quotas) {
        let key = format!("{}\u{1F}{}", source.as_str(), category);
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ hash64(key.as_bytes())));
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..quota] {
            in_train[i] = true;
        }
    }
    let mut ids = SplitIds::default();
    for (r, train) in corpus.iter().zip(in_train) {
        if train {
            ids.train.push(r.id.clone());
        } else {
            ids.val.push(r.id.clone());
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewSample {
    pub records: Vec<QARecord>,
    /// Sources that had fewer records than their quota, as (quota, available).
    pub shortfalls: BTreeMap<Source, (usize, usize)>,
}

/// Uniform sampling without replacement per source. Records come out
/// grouped by source in the order of the input.
pub fn sample_for_review(accepted: &[QARecord], config: &ReviewSampleConfig, seed: u64) -> Result<ReviewSample, AssembleError> {
    let sum: usize = config.per_source.values().sum();
    if sum != config.n_total {
        return Err(AssembleError::Config(format!(
            "review quotas sum to {sum}, expected n_total {}",
            config.n_total
        )));
    }
    let mut out = ReviewSample {
        records: Vec::with_capacity(config.n_total),
        shortfalls: BTreeMap::new(),
    };
    for (&source, &quota) in &config.per_source {
        let pool: Vec<&QARecord> = accepted.iter().filter(|r| r.source == source).collect();
        if pool.len() < quota {
            tracing::warn!(
                source = source.as_str(),
                quota,
                available = pool.len(),
                "not enough records for the review quota, sampling all"
            );
            out.shortfalls.insert(source, (quota, pool.len()));
            out.records.extend(pool.into_iter().cloned());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ hash64(source.as_str().as_bytes())));
        let mut picked = sample(&mut rng, pool.len(), quota).into_vec();
        picked.sort_unstable();
        out.records.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: usize,
    pub p95: usize,
    pub p99: usize,
}

/// Nearest-rank percentile: the ceil(p/100 · n)-th smallest value.
pub fn nearest_rank(sorted: &[usize], p: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn percentiles(mut values: Vec<usize>) -> Percentiles {
    values.sort_unstable();
    Percentiles {
        p50: nearest_rank(&values, 50.0),
        p95: nearest_rank(&values, 95.0),
        p99: nearest_rank(&values, 99.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldLengths {
    pub chars: Percentiles,
    pub tokens: Percentiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub records: usize,
    pub question: FieldLengths,
    pub answer: FieldLengths,
}

fn field_lengths<'a>(texts: impl Iterator<Item = &'a str> + Clone) -> FieldLengths {
    FieldLengths {
        chars: percentiles(texts.clone().map(|t| t.chars().count()).collect()),
        tokens: percentiles(texts.map(|t| t.split_whitespace().count()).collect()),
    }
}

pub fn length_stats(records: &[QARecord]) -> LengthStats {
    LengthStats {
        records: records.len(),
        question: field_lengths(records.iter().map(|r| r.question.as_str())),
        answer: field_lengths(records.iter().map(|r| r.answer.as_str())),
    }
}

pub fn corpus_id(ids: &SplitIds, config_digest: &str) -> String {
    let mut bytes = config_digest.as_bytes().to_vec();
    for id in ids.train.iter().chain(&ids.val) {
        bytes.push(0x1F);
        bytes.extend_from_slice(id.as_bytes());
    }
    format!("{:016x}", hash64(&bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub manifest: PathBuf,
    pub training_manifest: PathBuf,
    pub length_stats: PathBuf,
}

pub fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<(), AssembleError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes train/val JSONL, the corpus manifest, the training manifest and
/// length percentiles into `out_dir`.
pub fn export(
    corpus: &[QARecord],
    split: &SplitIds,
    training: &TrainingParams,
    config_digest: &str,
    out_dir: &Path,
) -> Result<(CorpusManifest, ExportPaths), AssembleError> {
    training.validate().map_err(AssembleError::Config)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let paths = ExportPaths {
        train: out_dir.join("train.jsonl"),
        val: out_dir.join("val.jsonl"),
        manifest: out_dir.join("manifest.json"),
        training_manifest: out_dir.join("training_manifest.json"),
        length_stats: out_dir.join("length_stats.json"),
    };

    let by_id: HashMap<&str, &QARecord> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let pick = |ids: &[String]| -> Result<Vec<QARecord>, AssembleError> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| AssembleError::Config(format!("split names unknown record {id}")))
            })
            .collect()
    };
    let train = pick(&split.train)?;
    let val = pick(&split.val)?;
    write_jsonl(&train, &paths.train)?;
    write_jsonl(&val, &paths.val)?;

    let mut counts = BTreeMap::new();
    for r in train.iter().chain(&val) {
        *counts.entry(r.source).or_insert(0) += 1;
    }
    let manifest = CorpusManifest {
        corpus_id: corpus_id(split, config_digest),
        counts,
        config_digest: config_digest.to_string(),
        split: split.clone(),
    };
    manifest.validate().map_err(AssembleError::Config)?;
    write_json_pretty(&manifest, &paths.manifest)?;

    let tm = TrainingManifest {
        learning_rate: training.learning_rate,
        schedule: training.schedule,
        warmup_steps: training.warmup_steps,
        epochs: training.epochs,
        batch_size: training.batch_size,
        mixed_precision: training.mixed_precision,
        eval_strategy: training.eval_strategy,
        train_path: "train.jsonl".into(),
        val_path: "val.jsonl".into(),
        config_digest: config_digest.to_string(),
    };
    write_json_pretty(&tm, &paths.training_manifest)?;

    let mut all = train;
    all.extend(val);
    write_json_pretty(&length_stats(&all), &paths.length_stats)?;
    Ok((manifest, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::read_jsonl;

    fn rec(i: usize, source: Source, category: &str) -> QARecord {
        let mut r = QARecord::new(&format!("سؤال رقم {i} عن الصداع"), &format!("جواب مفصل رقم {i} للمريض"), source);
        r.category = category.into();
        r
    }

    fn corpus(layout: &[(Source, &str, usize)]) -> Vec<QARecord> {
        let mut out = Vec::new();
        let mut i = 0;
        for &(s, c, n) in layout {
            for _ in 0..n {
                out.push(rec(i, s, c));
                i += 1;
            }
        }
        out
    }

    #[test]
    fn one_stratum_of_a_thousand() {
        let c = corpus(&[(Source::Real, "general", 1000)]);
        let s = split(&c, 0.95, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (950, 50));
    }

    #[test]
    fn two_strata_split_proportionally() {
        let c = corpus(&[(Source::Real, "a", 600), (Source::Real, "b", 400)]);
        let s = split(&c, 0.95, 7).unwrap();
        let train: HashSet<&String> = s.train.iter().collect();
        let a_train = c[..600].iter().filter(|r| train.contains(&r.id)).count();
        let b_train = c[600..].iter().filter(|r| train.contains(&r.id)).count();
        assert_eq!((a_train, b_train), (570, 380));
        assert_eq!(s.val.len(), 50);
    }

    #[test]
    fn quotas_stay_within_one_and_hit_the_global_target() {
        let sizes = [7, 3, 11, 1, 5, 2];
        for ratio in [0.5, 0.8, 0.95, 0.333] {
            let q = train_quotas(&sizes, ratio);
            for (&n, &k) in sizes.iter().zip(&q) {
                if n > 1 {
                    assert!((k as f64 - ratio * n as f64).abs() < 1.0, "{n} {k} {ratio}");
                }
            }
        }
        assert_eq!(train_quotas(&[1], 0.5), vec![1]);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let c = corpus(&[(Source::Mock, "x", 37), (Source::Real, "y", 12)]);
        let a = split(&c, 0.8, 1).unwrap();
        assert_eq!(a, split(&c, 0.8, 1).unwrap());
        assert_ne!(a, split(&c, 0.8, 2).unwrap());
        let train: HashSet<&String> = a.train.iter().collect();
        assert!(a.val.iter().all(|id| !train.contains(id)));
        assert_eq!(a.train.len() + a.val.len(), 49);
    }

    #[test]
    fn synthetic_copy_of_real_is_dropped() {
        let real = vec![rec(1, Source::Real, "g")];
        let mut copy = real[0].clone();
        copy.source = Source::Chatgpt4o;
        let other = rec(2, Source::Chatgpt4o, "g");
        let m = merge_and_protect(&real, &[copy, other.clone()], &DedupConfig::default()).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].source, Source::Real);
        assert_eq!(m.records[1].id, other.id);
        assert_eq!(m.dropped.len(), 1);
    }

    #[test]
    fn empty_synthetic_is_identity() {
        let real = corpus(&[(Source::Real, "g", 5)]);
        let m = merge_and_protect(&real, &[], &DedupConfig::default()).unwrap();
        assert_eq!(m.records, real);
        assert_eq!(m.counts[&Source::Real], 5);
    }

    #[test]
    fn id_collision_with_other_content_is_an_error() {
        let real = vec![rec(1, Source::Real, "g")];
        let mut forged = rec(2, Source::Gemini25pro, "g");
        forged.id = real[0].id.clone();
        assert!(matches!(
            merge_and_protect(&real, &[forged], &DedupConfig::default()),
            Err(AssembleError::IdCollision { .. })
        ));
    }

    #[test]
    fn review_sample_quota_and_shortfall() {
        let c = corpus(&[(Source::Chatgpt4o, "g", 300), (Source::Gemini25pro, "g", 260)]);
        let cfg = ReviewSampleConfig::default();
        let s = sample_for_review(&c, &cfg, 3).unwrap();
        assert_eq!(s.records.len(), 500);
        assert!(s.shortfalls.is_empty());
        assert_eq!(s, sample_for_review(&c, &cfg, 3).unwrap());

        let small = corpus(&[(Source::Chatgpt4o, "g", 10)]);
        let s = sample_for_review(&small, &cfg, 3).unwrap();
        assert_eq!(s.records.len(), 10);
        assert_eq!(s.shortfalls[&Source::Gemini25pro], (250, 0));

        let none = ReviewSampleConfig {
            n_total: 0,
            per_source: BTreeMap::new(),
        };
        assert!(sample_for_review(&c, &none, 3).unwrap().records.is_empty());
    }

    #[test]
    fn nearest_rank_by_hand() {
        // Three strings of 2, 5 and 9 chars: ranks ceil(1.5)=2, ceil(2.85)=3, ceil(2.97)=3.
        let mut records = Vec::new();
        for (q, a) in [("ab", "x y"), ("abcde", "x"), ("abcdefghi", "x y z w")] {
            records.push(QARecord::new(q, a, Source::Real));
        }
        let s = length_stats(&records);
        assert_eq!(s.question.chars, Percentiles { p50: 5, p95: 9, p99: 9 });
        assert_eq!(s.answer.tokens, Percentiles { p50: 2, p95: 4, p99: 4 });
        assert_eq!(nearest_rank(&[10, 20, 30, 40], 50.0), 20);
    }

    #[test]
    fn training_defaults_and_epoch_range() {
        let t = TrainingParams::default();
        assert_eq!(t.learning_rate, 5e-5);
        assert_eq!((t.warmup_steps, t.batch_size, t.epochs), (200, 8, 3));
        assert!(t.mixed_precision);
        assert!(TrainingParams { epochs: 6, ..t.clone() }.validate().is_err());
        assert!(TrainingParams { epochs: 5, ..t }.validate().is_ok());
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(&[(Source::Real, "g", 20), (Source::Mock, "h", 20)]);
        let s = split(&c, 0.9, 5).unwrap();
        let (manifest, paths) = export(&c, &s, &TrainingParams::default(), "00000000deadbeef", dir.path()).unwrap();
        let mut back = read_jsonl(&paths.train).unwrap();
        back.extend(read_jsonl(&paths.val).unwrap());
        let ids: HashSet<String> = back.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids, c.iter().map(|r| r.id.clone()).collect());
        assert_eq!(manifest.counts.values().sum::<usize>(), 40);

        let tm: serde_json::Value = serde_json::from_str(&fs::read_to_string(&paths.training_manifest).unwrap()).unwrap();
        let keys: Vec<&str> = tm.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            [
                "learning_rate",
                "schedule",
                "warmup_steps",
                "epochs",
                "batch_size",
                "mixed_precision",
                "eval_strategy",
                "train_path",
                "val_path",
                "config_digest"
            ]
        );
        assert_eq!(tm["schedule"], "cosine_decay");
        assert_eq!(tm["eval_strategy"], "per_epoch");
    }
}
