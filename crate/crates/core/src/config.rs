//! The single declarative run configuration and its digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::assemble::AssembleConfig;
use crate::curate::{CurateConfig, LengthBounds};
use crate::dedup::{hash64, DedupConfig};
use crate::embed::FilterConfig;
use crate::promptgen::PlanConfig;
use crate::record::Source;
use crate::textnorm::LangConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Parse failures, including unknown keys; serde names the key.
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub seeds: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub categories: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptgenSettings {
    pub n: usize,
    pub per_source: BTreeMap<Source, usize>,
    pub exemplars_per_prompt: usize,
    /// Seeds every random choice in the pipeline.
    pub master_seed: u64,
}

impl Default for PromptgenSettings {
    fn default() -> Self {
        Self {
            n: 200,
            per_source: BTreeMap::from([(Source::Chatgpt4o, 100), (Source::Gemini25pro, 100)]),
            exemplars_per_prompt: 3,
            master_seed: 42,
        }
    }
}

impl PromptgenSettings {
    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            n: self.n,
            per_source: self.per_source.clone(),
            exemplars_per_prompt: self.exemplars_per_prompt,
            master_seed: self.master_seed,
        }
    }

    /// Changes N and rescales the quotas proportionally, remainder to the
    /// earliest sources.
    pub fn with_n(&self, n: usize) -> Self {
        let old: usize = self.per_source.values().sum();
        let mut per_source = BTreeMap::new();
        if old == 0 {
            return Self {
                n,
                per_source,
                ..self.clone()
            };
        }
        let mut given = 0;
        for (&s, &q) in &self.per_source {
            let share = q * n / old;
            per_source.insert(s, share);
            given += share;
        }
        for q in per_source.values_mut() {
            if given == n {
                break;
            }
            *q += 1;
            given += 1;
        }
        Self {
            n,
            per_source,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Http,
}

/// One generation backend. The API key is read from the environment
/// variable named by `api_key_env` and never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSettings {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub requests_per_second: f64,
    pub concurrency: usize,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
    /// Mock only: share of completions returned as unparseable text.
    pub malformed_rate: f64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            model: None,
            api_key_env: None,
            temperature: 0.7,
            max_tokens: 512,
            requests_per_second: 5.0,
            concurrency: 4,
            max_attempts: 5,
            backoff_base_ms: 500,
            timeout_ms: 60_000,
            malformed_rate: 0.05,
        }
    }
}

impl ProviderSettings {
    pub fn validate(&self, source: Source) -> Result<(), String> {
        if self.kind == ProviderKind::Http && self.endpoint.is_none() {
            return Err(format!("providers.{source}: http provider needs an endpoint"));
        }
        if !(self.requests_per_second > 0.0) {
            return Err(format!("providers.{source}: requests_per_second must be positive"));
        }
        if self.concurrency == 0 || self.max_attempts == 0 {
            return Err(format!("providers.{source}: concurrency and max_attempts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.malformed_rate) {
            return Err(format!("providers.{source}: malformed_rate must be within [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSettings {
    /// "deterministic" or "http".
    pub kind: String,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            kind: "deterministic".into(),
            endpoint: None,
            api_key_env: None,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSettings {
    pub idf: bool,
    pub seeds: Vec<u64>,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        Self {
            idf: false,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub corpus: CorpusSettings,
    pub promptgen: PromptgenSettings,
    pub providers: BTreeMap<Source, ProviderSettings>,
    pub langguard: LangConfig,
    pub length: LengthBounds,
    pub dedup: DedupConfig,
    pub filter: FilterConfig,
    pub embeddings: EmbeddingSettings,
    pub assemble: AssembleConfig,
    pub score: ScoreSettings,
}

impl PipelineConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            cfg.corpus.resolve_against(base);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = ConfigError::Invalid;
        self.dedup.validate().map_err(|e| bad(e.to_string()))?;
        self.filter.validate().map_err(bad)?;
        self.assemble.validate().map_err(bad)?;
        let sum: usize = self.promptgen.per_source.values().sum();
        if sum != self.promptgen.n {
            return Err(bad(format!(
                "promptgen.per_source sums to {sum}, expected n = {}",
                self.promptgen.n
            )));
        }
        for (source, p) in &self.providers {
            p.validate(*source).map_err(bad)?;
        }
        if !matches!(self.embeddings.kind.as_str(), "deterministic" | "http") {
            return Err(bad(format!(
                "embeddings.kind must be deterministic or http, got {}",
                self.embeddings.kind
            )));
        }
        if self.score.seeds.is_empty() {
            return Err(bad("score.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn provider(&self, source: Source) -> ProviderSettings {
        self.providers.get(&source).cloned().unwrap_or_default()
    }

    pub fn curate_config(&self) -> CurateConfig {
        CurateConfig {
            lang: self.langguard,
            length: self.length.clone(),
            dedup: self.dedup.clone(),
            filter: self.filter.clone(),
        }
    }

    /// 16 hex chars of hash64 over the sorted-key compact JSON form.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut text = String::new();
        write_canonical(&value, &mut text);
        format!("{:016x}", hash64(text.as_bytes()))
    }
}

impl CorpusSettings {
    fn resolve_against(&mut self, base: &Path) {
        for p in [&mut self.seeds, &mut self.real, &mut self.templates, &mut self.categories]
            .into_iter()
            .flatten()
        {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
