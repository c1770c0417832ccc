//! Generation planning: prompt templates with slot variation, seed
//! categorization and exemplar anchoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::{hash64, mix64};
use crate::record::{QARecord, Source};
use crate::textnorm::canonical;

pub const GENERAL: &str = "general";

/// Output contract appended to every prompt; providers must answer with a
/// single JSON object.
pub const FORMAT_INSTRUCTIONS: &str = "Reply with exactly one JSON object and nothing else, in the form \
{\"question\": \"...\", \"answer\": \"...\"}. The question is the patient's message and the answer is \
the doctor's reply. Write both values in Arabic only, without transliteration or English words.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: unbalanced brace at byte {offset}")]
    UnbalancedBrace { template: String, offset: usize },
    #[error("template {template}: {{{name}}} must appear exactly once, found {count}")]
    PlaceholderCount { template: String, name: String, count: usize },
    #[error("template {template}: missing value for placeholder {{{name}}}")]
    MissingSlot { template: String, name: String },
    #[error("malformed template file: {0}")]
    MalformedTemplates(String),
    #[error("malformed category rule file: {0}")]
    MalformedRules(String),
    #[error("plan size N must be positive")]
    ZeroRequests,
    #[error("seed corpus is empty")]
    EmptySeeds,
    #[error("no templates loaded")]
    NoTemplates,
    #[error("per-source quotas sum to {sum}, expected N = {n}")]
    QuotaMismatch { sum: usize, n: usize },
    #[error("no category has at least {k} seed exemplars")]
    InsufficientExemplars { k: usize },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Placeholder {
    Category,
    Tone,
    Severity,
    Demographic,
    Exemplars,
    FormatInstructions,
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "category" => Placeholder::Category,
            "tone" => Placeholder::Tone,
            "severity" => Placeholder::Severity,
            "demographic" => Placeholder::Demographic,
            "exemplars" => Placeholder::Exemplars,
            "format_instructions" => Placeholder::FormatInstructions,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Placeholder::Category => "category",
            Placeholder::Tone => "tone",
            Placeholder::Severity => "severity",
            Placeholder::Demographic => "demographic",
            Placeholder::Exemplars => "exemplars",
            Placeholder::FormatInstructions => "format_instructions",
        }
    }
}

const VARIED_SLOTS: [Placeholder; 3] = [Placeholder::Tone, Placeholder::Severity, Placeholder::Demographic];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Placeholder),
}

fn parse_body(template_id: &str, body: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut chars = body.char_indices().peekable();
    while let Some((offset, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for (_, n) in chars.by_ref() {
                    if n == '}' {
                        closed = true;
                        break;
                    }
                    name.push(n);
                }
                if !closed {
                    return Err(PromptError::UnbalancedBrace {
                        template: template_id.into(),
                        offset,
                    });
                }
                let slot = Placeholder::parse(&name).ok_or_else(|| PromptError::UnknownPlaceholder {
                    template: template_id.into(),
                    name: name.clone(),
                })?;
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Slot(slot));
            }
            '}' => {
                return Err(PromptError::UnbalancedBrace {
                    template: template_id.into(),
                    offset,
                })
            }
            c => text.push(c),
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    #[serde(default)]
    pub applicable_categories: Vec<String>,
}

impl PromptTemplate {
    /// Checks placeholder names and that `{exemplars}` and
    /// `{format_instructions}` each occur exactly once.
    pub fn validate(&self) -> Result<(), PromptError> {
        let segments = parse_body(&self.template_id, &self.body)?;
        for required in [Placeholder::Exemplars, Placeholder::FormatInstructions] {
            let count = segments.iter().filter(|s| **s == Segment::Slot(required)).count();
            if count != 1 {
                return Err(PromptError::PlaceholderCount {
                    template: self.template_id.clone(),
                    name: required.name().into(),
                    count,
                });
            }
        }
        Ok(())
    }

    fn used_slots(&self) -> BTreeSet<Placeholder> {
        parse_body(&self.template_id, &self.body)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(p) => Some(p),
                Segment::Text(_) => None,
            })
            .collect()
    }
}

/// Template file contents: the templates plus the slot value pools.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
    pub templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let set: TemplateSet = serde_json::from_str(text).map_err(|e| PromptError::MalformedTemplates(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.templates.is_empty() {
            return Err(PromptError::NoTemplates);
        }
        for name in self.slots.keys() {
            if !VARIED_SLOTS.iter().any(|p| p.name() == name) {
                return Err(PromptError::MalformedTemplates(format!("unknown slot pool {name:?}")));
            }
        }
        let mut ids = BTreeSet::new();
        for t in &self.templates {
            t.validate()?;
            if !ids.insert(&t.template_id) {
                return Err(PromptError::MalformedTemplates(format!(
                    "duplicate template_id {:?}",
                    t.template_id
                )));
            }
            for slot in t.used_slots() {
                if VARIED_SLOTS.contains(&slot) && self.pool(slot).is_empty() {
                    return Err(PromptError::MissingSlot {
                        template: t.template_id.clone(),
                        name: slot.name().into(),
                    });
                }
            }
        }
        Ok(())
    }

    fn pool(&self, slot: Placeholder) -> &[String] {
        self.slots.get(slot.name()).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Expands placeholders. `slot_values` supplies category, tone, severity and
/// demographic; exemplars become numbered question–answer blocks.
pub fn render(template: &PromptTemplate, slot_values: &BTreeMap<String, String>, exemplars: &[&QARecord]) -> Result<String, PromptError> {
    let mut out = String::new();
    for segment in parse_body(&template.template_id, &template.body)? {
        match segment {
            Segment::Text(t) => out.push_str(&t),
            Segment::Slot(Placeholder::Exemplars) => out.push_str(&exemplar_block(exemplars)),
            Segment::Slot(Placeholder::FormatInstructions) => out.push_str(FORMAT_INSTRUCTIONS),
            Segment::Slot(p) => {
                let value = slot_values.get(p.name()).ok_or_else(|| PromptError::MissingSlot {
                    template: template.template_id.clone(),
                    name: p.name().into(),
                })?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

fn exemplar_block(exemplars: &[&QARecord]) -> String {
    exemplars
        .iter()
        .enumerate()
        .map(|(i, r)| format!("مثال {}:\nسؤال المريض: {}\nرد الطبيب: {}", i + 1, r.question, r.answer))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Ordered category → keyword rules, matched on canonical text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategoryRules {
    rules: Vec<(String, Vec<String>)>,
}

impl CategoryRules {
    pub fn new(rules: Vec<(String, Vec<String>)>) -> Self {
        let rules = rules
            .into_iter()
            .map(|(label, kws)| {
                let kws = kws.iter().map(|k| canonical(k)).filter(|k| !k.is_empty()).collect();
                (label, kws)
            })
            .collect();
        Self { rules }
    }

    /// Parses a JSON object mapping label to keyword list, keeping file order.
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| PromptError::MalformedRules(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| PromptError::MalformedRules("expected an object of label -> keywords".into()))?;
        let mut rules = Vec::with_capacity(obj.len());
        for (label, kws) in obj {
            let list = kws
                .as_array()
                .and_then(|a| a.iter().map(|k| k.as_str().map(str::to_string)).collect::<Option<Vec<_>>>())
                .ok_or_else(|| PromptError::MalformedRules(format!("{label:?}: expected a list of strings")))?;
            rules.push((label.clone(), list));
        }
        Ok(Self::new(rules))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().map(|(l, _)| l.as_str())
    }
}

/// First category in rule order with a keyword hit, else "general".
pub fn categorize_seed(record: &QARecord, rules: &CategoryRules) -> String {
    let text = format!("{} {}", canonical(&record.question), canonical(&record.answer));
    rules
        .rules
        .iter()
        .find(|(_, kws)| kws.iter().any(|k| text.contains(k.as_str())))
        .map(|(label, _)| label.clone())
        .unwrap_or_else(|| GENERAL.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub n: usize,
    pub per_source: BTreeMap<Source, usize>,
    pub exemplars_per_prompt: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: String,
    pub source: Source,
    pub template_id: String,
    pub slot_values: BTreeMap<String, String>,
    pub exemplar_ids: Vec<String>,
    pub rendered_prompt: String,
}

impl GenerationRequest {
    pub fn category(&self) -> &str {
        self.slot_values.get("category").map(String::as_str).unwrap_or(GENERAL)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub plan_id: String,
    pub master_seed: u64,
    pub n: usize,
    pub per_source: BTreeMap<Source, usize>,
    pub exemplars_per_prompt: usize,
    #[serde(default)]
    pub config_digest: String,
    pub requests: Vec<GenerationRequest>,
}

impl GenerationPlan {
    pub fn request_map(&self) -> HashMap<&str, &GenerationRequest> {
        self.requests.iter().map(|r| (r.request_id.as_str(), r)).collect()
    }

    pub fn counts_by_source(&self) -> BTreeMap<Source, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.requests {
            *counts.entry(r.source).or_insert(0) += 1;
        }
        counts
    }
}

struct Combination<'a> {
    template: &'a PromptTemplate,
    category: String,
    slots: BTreeMap<String, String>,
}

/// Source for request `assigned.len()`: the source furthest behind its
/// share, earliest in enum order on ties.
fn next_source(quotas: &[(Source, usize)], assigned: &[usize]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &(_, q)) in quotas.iter().enumerate() {
        if assigned[i] >= q {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                // (assigned_i + 1) / q_i < (assigned_b + 1) / q_b
                let lhs = (assigned[i] as u128 + 1) * quotas[b].1 as u128;
                let rhs = (assigned[b] as u128 + 1) * q as u128;
                if lhs < rhs {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.expect("quotas sum to N")
}

/// Builds the deterministic request schedule. Seeds must already carry
/// their categories.
pub fn build_plan(seeds: &[QARecord], templates: &TemplateSet, config: &PlanConfig) -> Result<GenerationPlan, PromptError> {
    if config.n == 0 {
        return Err(PromptError::ZeroRequests);
    }
    if seeds.is_empty() {
        return Err(PromptError::EmptySeeds);
    }
    templates.validate()?;
    let sum: usize = config.per_source.values().sum();
    if sum != config.n {
        return Err(PromptError::QuotaMismatch { sum, n: config.n });
    }
    let k = config.exemplars_per_prompt;

    let mut pools: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in seeds.iter().enumerate() {
        pools.entry(s.category.as_str()).or_default().push(i);
    }
    let general_ok = pools.get(GENERAL).is_some_and(|p| p.len() >= k);
    let eligible = |cat: &str| general_ok || pools.get(cat).is_some_and(|p| p.len() >= k);
    let seed_categories: Vec<String> = pools.keys().map(|c| c.to_string()).collect();

    let mut combos: Vec<Combination> = Vec::new();
    for template in &templates.templates {
        let used = template.used_slots();
        let categories = if template.applicable_categories.is_empty() {
            seed_categories.clone()
        } else {
            template.applicable_categories.clone()
        };
        for category in categories.into_iter().filter(|c| eligible(c)) {
            let mut partial = vec![BTreeMap::from([("category".to_string(), category.clone())])];
            for slot in VARIED_SLOTS.iter().filter(|s| used.contains(s)) {
                partial = partial
                    .into_iter()
                    .flat_map(|base| {
                        templates.pool(*slot).iter().map(move |v| {
                            let mut next = base.clone();
                            next.insert(slot.name().to_string(), v.clone());
                            next
                        })
                    })
                    .collect();
            }
            combos.extend(partial.into_iter().map(|slots| Combination {
                template,
                category: category.clone(),
                slots,
            }));
        }
    }
    if combos.is_empty() {
        return Err(PromptError::InsufficientExemplars { k });
    }

    let plan_id = plan_id(seeds, templates, config);
    let quotas: Vec<(Source, usize)> = config.per_source.iter().filter(|(_, &q)| q > 0).map(|(&s, &q)| (s, q)).collect();
    let mut assigned = vec![0usize; quotas.len()];
    let mut requests = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let slot = next_source(&quotas, &assigned);
        assigned[slot] += 1;
        let combo = &combos[i % combos.len()];
        let pool = match pools.get(combo.category.as_str()) {
            Some(p) if p.len() >= k => p,
            _ => &pools[GENERAL],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.master_seed.wrapping_add(i as u64)));
        let exemplars: Vec<&QARecord> = sample(&mut rng, pool.len(), k).iter().map(|j| &seeds[pool[j]]).collect();
        let rendered_prompt = render(combo.template, &combo.slots, &exemplars)?;
        requests.push(GenerationRequest {
            request_id: format!("{plan_id}-{i:06}"),
            source: quotas[slot].0,
            template_id: combo.template.template_id.clone(),
            slot_values: combo.slots.clone(),
            exemplar_ids: exemplars.iter().map(|r| r.id.clone()).collect(),
            rendered_prompt,
        });
    }

    Ok(GenerationPlan {
        plan_id,
        master_seed: config.master_seed,
        n: config.n,
        per_source: config.per_source.clone(),
        exemplars_per_prompt: k,
        config_digest: String::new(),
        requests,
    })
}

fn plan_id(seeds: &[QARecord], templates: &TemplateSet, config: &PlanConfig) -> String {
    let mut material = serde_json::to_vec(config).expect("plan config serializes");
    material.extend(serde_json::to_vec(templates).expect("templates serialize"));
    for s in seeds {
        material.extend_from_slice(s.id.as_bytes());
        material.extend_from_slice(s.category.as_bytes());
    }
    format!("{:016x}", hash64(&material))[..8].to_string()
}
