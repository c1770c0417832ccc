//! The curation funnel: parse → normalize → language → length → exact
//! dedup → near dedup → semantic band, with a rejection ledger and
//! per-stage, per-source counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{parse_completion, RawCompletion};
use crate::dedup::{find_duplicates, hash64, DedupConfig, DedupError, DuplicatePair};
use crate::embed::{band_decision, EmbedError, EmbeddingProvider, FilterConfig, SeedIndex};
use crate::promptgen::{GenerationPlan, GenerationRequest};
use crate::record::{compute_record_id, CurationStatus, QARecord, Source, Stage};
use crate::textnorm::{canonical, surface_clean, verify_language, LangConfig, LangOutcome};

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error("semantic stage: {0}")]
    Embed(#[from] EmbedError),
}

/// Canonical-length bounds in characters, inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthBounds {
    pub question_min: usize,
    pub question_max: usize,
    pub answer_min: usize,
    pub answer_max: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        Self {
            question_min: 10,
            question_max: 1000,
            answer_min: 20,
            answer_max: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurateConfig {
    pub lang: LangConfig,
    pub length: LengthBounds,
    pub dedup: DedupConfig,
    pub filter: FilterConfig,
}

impl CurateConfig {
    pub fn validate(&self) -> Result<(), CurateError> {
        self.dedup.validate()?;
        self.filter.validate().map_err(CurateError::Config)?;
        let l = &self.length;
        if l.question_min > l.question_max || l.answer_min > l.answer_max {
            return Err(CurateError::Config("length bounds have min above max".into()));
        }
        Ok(())
    }
}

/// One line of the rejection ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub request_id: String,
    pub source: Source,
    pub stage: Stage,
    pub reason: String,
    pub record_id: Option<String>,
    pub question: Option<String>,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    #[serde(rename = "in")]
    pub input: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl StageCounts {
    pub fn add(&mut self, other: &StageCounts) {
        self.input += other.input;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.input > 0).then(|| self.accepted as f64 / self.input as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub per_source: BTreeMap<Source, StageCounts>,
}

impl StageReport {
    pub fn total(&self) -> StageCounts {
        let mut t = StageCounts::default();
        for c in self.per_source.values() {
            t.add(c);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub run_id: String,
    pub config_digest: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub stages: Vec<StageReport>,
}

impl CurationReport {
    /// `in = accepted + rejected` per stage and source, and each stage's
    /// accepted count feeds the next stage.
    pub fn check_conservation(&self) -> Result<(), String> {
        for s in &self.stages {
            for (src, c) in &s.per_source {
                if c.input != c.accepted + c.rejected {
                    return Err(format!("{} / {src}: in {} != {} + {}", s.stage, c.input, c.accepted, c.rejected));
                }
            }
        }
        for pair in self.stages.windows(2) {
            let sources: HashSet<&Source> = pair[0].per_source.keys().chain(pair[1].per_source.keys()).collect();
            for src in sources {
                let out = pair[0].per_source.get(src).map_or(0, |c| c.accepted);
                let next_in = pair[1].per_source.get(src).map_or(0, |c| c.input);
                if out != next_in {
                    return Err(format!(
                        "{src}: {} accepted {out} but {} received {next_in}",
                        pair[0].stage, pair[1].stage
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sources(&self) -> Vec<Source> {
        let mut all: Vec<Source> = self.stages.iter().flat_map(|s| s.per_source.keys().copied()).collect();
        all.sort();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunnelOutput {
    pub accepted: Vec<QARecord>,
    pub rejections: Vec<Rejection>,
    pub duplicates: Vec<DuplicatePair>,
    pub report: CurationReport,
}

struct Candidate<'a> {
    completion: &'a RawCompletion,
    request: Option<&'a GenerationRequest>,
    source: Source,
    record: Option<QARecord>,
}

impl Candidate<'_> {
    fn reject(&self, stage: Stage, reason: impl Into<String>) -> Rejection {
        Rejection {
            request_id: self.completion.request_id.clone(),
            source: self.source,
            stage,
            reason: reason.into(),
            record_id: self.record.as_ref().map(|r| r.id.clone()),
            question: self.record.as_ref().map(|r| r.question.clone()),
            answer: self.record.as_ref().map(|r| r.answer.clone()),
        }
    }
}

struct Tally {
    stages: Vec<StageReport>,
}

impl Tally {
    fn new() -> Self {
        Self {
            stages: Stage::FUNNEL
                .iter()
                .map(|&stage| StageReport {
                    stage,
                    per_source: BTreeMap::new(),
                })
                .collect(),
        }
    }

    fn record(&mut self, stage: usize, source: Source, accepted: bool) {
        let c = self.stages[stage].per_source.entry(source).or_default();
        c.input += 1;
        if accepted {
            c.accepted += 1;
        } else {
            c.rejected += 1;
        }
    }
}

/// Runs every completion through the funnel. Completions are processed in
/// request-id order and repeated request ids count once, so the outputs
/// are a pure function of the inputs and `clock`.
pub fn run_funnel(
    completions: &[RawCompletion],
    plan: &GenerationPlan,
    seed_index: &SeedIndex<f64>,
    provider: &dyn EmbeddingProvider,
    config: &CurateConfig,
    config_digest: &str,
    clock: DateTime<Utc>,
) -> Result<FunnelOutput, CurateError> {
    config.validate()?;
    let requests = plan.request_map();

    let mut ordered: Vec<&RawCompletion> = completions.iter().collect();
    ordered.sort_by(|a, b| a.request_id.cmp(&b.request_id));
    let mut seen = HashSet::new();
    ordered.retain(|c| seen.insert(c.request_id.as_str()));

    let mut tally = Tally::new();
    let mut rejections = Vec::new();
    let mut live: Vec<Candidate> = Vec::with_capacity(ordered.len());

    // Stages 1-4 are per record.
    for completion in ordered {
        let request = requests.get(completion.request_id.as_str()).copied();
        let mut cand = Candidate {
            completion,
            request,
            source: request.map_or(completion.provider, |r| r.source),
            record: None,
        };
        let verdict = per_record_stages(&mut cand, config, clock);
        let failed_at = verdict.as_ref().err().map(|(stage, _)| *stage);
        for (i, &stage) in Stage::FUNNEL[..4].iter().enumerate() {
            tally.record(i, cand.source, failed_at != Some(stage));
            if failed_at == Some(stage) {
                break;
            }
        }
        match verdict {
            Ok(()) => live.push(cand),
            Err((stage, reason)) => rejections.push(cand.reject(stage, reason)),
        }
    }

    // Stage 5: exact duplicates, first occurrence kept.
    let mut first_holder: HashMap<String, String> = HashMap::new();
    let mut unique = Vec::with_capacity(live.len());
    for cand in live {
        let id = cand.record.as_ref().expect("live candidates carry records").id.clone();
        let kept = first_holder.get(&id).cloned();
        tally.record(4, cand.source, kept.is_none());
        match kept {
            Some(first) => rejections.push(cand.reject(Stage::ExactDup, format!("exact duplicate of request {first}"))),
            None => {
                first_holder.insert(id, cand.completion.request_id.clone());
                unique.push(cand);
            }
        }
    }

    // Stage 6: near duplicates within the batch.
    let records: Vec<QARecord> = unique.iter().map(|c| c.record.clone().expect("record")).collect();
    let outcome = find_duplicates(&records, &|_| false, &config.dedup)?;
    let removed: HashMap<&str, &DuplicatePair> = outcome.pairs.iter().map(|p| (p.removed_id.as_str(), p)).collect();
    let collided: HashSet<&str> = outcome.question_collisions.iter().map(|(_, later)| later.as_str()).collect();
    let mut after_dedup = Vec::with_capacity(unique.len());
    for mut cand in unique {
        let id = cand.record.as_ref().expect("record").id.clone();
        let hit = removed.get(id.as_str());
        tally.record(5, cand.source, hit.is_none());
        if let Some(p) = hit {
            if let Some(r) = cand.record.as_mut() {
                r.metrics.insert("jaccard_max".into(), p.jaccard);
            }
            rejections.push(cand.reject(
                Stage::NearDup,
                format!("near duplicate of {} (jaccard {:.4})", p.kept_id, p.jaccard),
            ));
            continue;
        }
        if collided.contains(id.as_str()) {
            if let Some(r) = cand.record.as_mut() {
                r.metrics.insert("question_dup".into(), 1.0);
            }
        }
        after_dedup.push(cand);
    }

    // Stage 7: semantic band against the seed index.
    let texts: Vec<String> = after_dedup
        .iter()
        .map(|c| {
            let r = c.record.as_ref().expect("record");
            config.filter.target.text_of(&r.question, &r.answer)
        })
        .collect();
    let embeddings = if texts.is_empty() {
        Vec::new()
    } else {
        provider.embed_texts(&texts)?
    };
    if embeddings.len() != texts.len() {
        return Err(CurateError::Embed(EmbedError::Provider(format!(
            "expected {} vectors, got {}",
            texts.len(),
            embeddings.len()
        ))));
    }
    let mut accepted = Vec::with_capacity(after_dedup.len());
    for (mut cand, embedding) in after_dedup.into_iter().zip(&embeddings) {
        let s = seed_index.seed_similarity(embedding, config.filter.k_nn)?;
        let decision = band_decision(s, &config.filter);
        let record = cand.record.as_mut().expect("record");
        record.metrics.insert("semantic_sim".into(), s);
        tally.record(6, cand.source, decision.reason().is_none());
        match decision.reason() {
            None => {
                let mut r = cand.record.take().expect("record");
                r.status = CurationStatus::accepted();
                accepted.push(r);
            }
            Some(reason) => rejections.push(cand.reject(Stage::Semantic, reason)),
        }
    }

    rejections.sort_by(|a, b| a.request_id.cmp(&b.request_id));
    let run_id = run_id(plan, config_digest, completions.len(), accepted.len());
    let report = CurationReport {
        run_id,
        config_digest: config_digest.to_string(),
        started_at: clock,
        finished_at: clock,
        stages: tally.stages,
    };
    Ok(FunnelOutput {
        accepted,
        rejections,
        duplicates: outcome.pairs,
        report,
    })
}

fn per_record_stages(cand: &mut Candidate, config: &CurateConfig, clock: DateTime<Utc>) -> Result<(), (Stage, String)> {
    let Some(request) = cand.request else {
        return Err((Stage::Parse, format!("unknown request_id {}", cand.completion.request_id)));
    };
    let (q_raw, a_raw) = parse_completion(&cand.completion.raw_text).map_err(|e| (Stage::Parse, e.to_string()))?;

    let question = surface_clean(&q_raw);
    let answer = surface_clean(&a_raw);
    let mut record = QARecord::new(&question, &answer, cand.source);
    record.category = request.category().to_string();
    record.template_id = Some(request.template_id.clone());
    record.seed_ids = request.exemplar_ids.clone();
    record.created_at = clock;
    cand.record = Some(record);
    if question.is_empty() || answer.is_empty() {
        let which = if question.is_empty() { "question" } else { "answer" };
        return Err((Stage::Normalize, format!("empty {which} after cleaning")));
    }

    let lang = verify_language(&format!("{question} {answer}"), &config.lang);
    let record = cand.record.as_mut().expect("record set above");
    record.metrics.insert("arabic_ratio".into(), lang.arabic_ratio);
    if lang.outcome != LangOutcome::Pass {
        return Err((Stage::Langguard, lang.outcome.as_str().to_string()));
    }

    let q_len = canonical(&question).chars().count();
    let a_len = canonical(&answer).chars().count();
    let b = &config.length;
    if !(b.question_min..=b.question_max).contains(&q_len) {
        return Err((
            Stage::Length,
            format!("question length {q_len} outside [{}, {}]", b.question_min, b.question_max),
        ));
    }
    if !(b.answer_min..=b.answer_max).contains(&a_len) {
        return Err((
            Stage::Length,
            format!("answer length {a_len} outside [{}, {}]", b.answer_min, b.answer_max),
        ));
    }
    debug_assert_eq!(record.id, compute_record_id(&question, &answer));
    Ok(())
}

fn run_id(plan: &GenerationPlan, config_digest: &str, raw: usize, accepted: usize) -> String {
    let material = format!("{}|{}|{}|{}", plan.plan_id, config_digest, raw, accepted);
    format!("{:016x}", hash64(material.as_bytes()))
}

/// One row of the funnel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub source: String,
    pub stage: String,
    #[serde(rename = "in")]
    pub input: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub acceptance_rate: Option<f64>,
}

pub const TOTAL_ROW: &str = "total";

fn cell(c: &StageCounts) -> String {
    c.rate().map_or_else(|| "—".to_string(), |r| format!("{:.1}%", r * 100.0))
}

/// Per-source × per-stage acceptance rates with a totals row.
pub fn funnel_rows(report: &CurationReport) -> Vec<FunnelRow> {
    let mut rows = Vec::new();
    let sources = report.sources();
    let labelled = sources
        .iter()
        .map(|s| (s.as_str().to_string(), Some(*s)))
        .chain([(TOTAL_ROW.to_string(), None)]);
    for (label, source) in labelled {
        for stage in &report.stages {
            let c = match source {
                Some(src) => stage.per_source.get(&src).copied().unwrap_or_default(),
                None => stage.total(),
            };
            rows.push(FunnelRow {
                source: label.clone(),
                stage: stage.stage.as_str().to_string(),
                input: c.input,
                accepted: c.accepted,
                rejected: c.rejected,
                acceptance_rate: c.rate(),
            });
        }
    }
    rows
}

pub fn funnel_csv(report: &CurationReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in funnel_rows(report) {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

pub fn read_funnel_csv(text: &str) -> Result<Vec<FunnelRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// Text table: one row per source plus totals, one column per stage plus
/// the end-to-end rate.
pub fn funnel_table(report: &CurationReport) -> String {
    let mut out = String::new();
    let header: Vec<&str> = report.stages.iter().map(|s| s.stage.as_str()).collect();
    let _ = writeln!(out, "| source | {} | end-to-end |", header.join(" | "));
    let _ = writeln!(out, "|---|{}---:|", "---:|".repeat(header.len()));
    let mut line = |label: &str, counts: Vec<StageCounts>| {
        let cells: Vec<String> = counts.iter().map(cell).collect();
        let e2e = match (counts.first(), counts.last()) {
            (Some(first), Some(last)) => cell(&StageCounts {
                input: first.input,
                accepted: last.accepted,
                rejected: first.input - last.accepted,
            }),
            _ => "—".to_string(),
        };
        let _ = writeln!(out, "| {label} | {} | {e2e} |", cells.join(" | "));
    };
    for src in report.sources() {
        line(
            src.as_str(),
            report
                .stages
                .iter()
                .map(|s| s.per_source.get(&src).copied().unwrap_or_default())
                .collect(),
        );
    }
    line(TOTAL_ROW, report.stages.iter().map(StageReport::total).collect());
    out
}
