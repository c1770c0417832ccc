//! Pipeline commands behind the `medaug` binary.
//!
//! Every command reads and writes fixed file names under `--out-dir`, so a
//! run is a directory of artifacts that later commands pick up.

pub mod args;
pub mod commands;

use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use medaug_core::config::PipelineConfig;
use medaug_core::promptgen::{categorize_seed, CategoryRules};
use medaug_core::record::read_jsonl_values;
use medaug_core::textnorm::surface_clean;
use medaug_core::{QARecord, Source};
use serde::{Deserialize, Serialize};

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad input or configuration; exit code 1.
    Validation(anyhow::Error),
    /// Anything that went wrong while doing the work; exit code 2.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(anyhow::anyhow!("{msg}"))
}

pub(crate) trait Runtime<T> {
    fn runtime(self) -> CliResult<T>;
    fn validation(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Runtime<T> for Result<T, E> {
    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }

    fn validation(self) -> CliResult<T> {
        self.map_err(|e| CliError::Validation(e.into()))
    }
}

/// File names inside the output directory.
pub mod files {
    pub const RUN_CONFIG: &str = "run_config.json";
    pub const PLAN: &str = "plan.json";
    pub const COMPLETIONS: &str = "completions.jsonl";
    pub const GENERATION_FAILURES: &str = "generation_failures.jsonl";
    pub const GENERATION_META: &str = "generation_meta.json";
    pub const ACCEPTED: &str = "accepted.jsonl";
    pub const REJECTIONS: &str = "rejections.jsonl";
    pub const DUPLICATES: &str = "duplicates.jsonl";
    pub const CURATION_REPORT: &str = "curation_report.json";
    pub const FUNNEL_CSV: &str = "funnel.csv";
    pub const CORPUS_DIR: &str = "corpus";
    pub const MERGE_DROPPED: &str = "merge_dropped.jsonl";
    pub const REVIEW_SAMPLE: &str = "review_sample.jsonl";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const SCORE_REPORT: &str = "score_report.json";
    pub const REPORT: &str = "report.md";
}

/// Resolved configuration plus where the run lives.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub digest: String,
    pub out_dir: PathBuf,
    pub force: bool,
    pub clock: DateTime<Utc>,
}

impl Context {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Refuses to combine artifacts made under another configuration.
    pub fn check_digest(&self, what: &str, digest: &str) -> CliResult<()> {
        if digest == self.digest {
            return Ok(());
        }
        if self.force {
            tracing::warn!(artifact = what, expected = %self.digest, found = digest, "config digest mismatch ignored (--force)");
            return Ok(());
        }
        Err(invalid(format!(
            "{what} was produced with config digest {digest}, current config is {}; rerun the earlier steps or pass --force",
            self.digest
        )))
    }
}

/// SOURCE_DATE_EPOCH when set, so repeated runs stamp identical times.
pub fn clock_from_env() -> CliResult<DateTime<Utc>> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v
                .trim()
                .parse()
                .map_err(|_| invalid(format!("SOURCE_DATE_EPOCH is not an integer: {v:?}")))?;
            Utc.timestamp_opt(secs, 0)
                .single()
                .ok_or_else(|| invalid("SOURCE_DATE_EPOCH out of range"))
        }
        Err(_) => Ok(Utc::now()),
    }
}

#[derive(Debug, Deserialize)]
struct SeedLine {
    question: String,
    answer: String,
    #[serde(default)]
    category: Option<String>,
}

/// Reads a real/seed corpus: one JSON object per line with at least
/// `question` and `answer`. Text is surface-cleaned and ids recomputed;
/// repeated content keeps its first occurrence.
pub fn load_seed_corpus(path: &Path, rules: Option<&CategoryRules>, clock: DateTime<Utc>) -> CliResult<Vec<QARecord>> {
    let lines: Vec<(usize, SeedLine)> = read_jsonl_values(path).validation()?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (line, s) in lines {
        let q = surface_clean(&s.question);
        let a = surface_clean(&s.answer);
        if q.is_empty() || a.is_empty() {
            return Err(invalid(format!("{}: line {line}: empty question or answer", path.display())));
        }
        let mut r = QARecord::new(&q, &a, Source::Real);
        r.created_at = clock;
        r.category = match (s.category, rules) {
            (Some(c), _) => c,
            (None, Some(rules)) => categorize_seed(&r, rules),
            (None, None) => r.category,
        };
        if seen.insert(r.id.clone()) {
            out.push(r);
        } else {
            tracing::warn!(path = %path.display(), line, "duplicate seed content skipped");
        }
    }
    Ok(out)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn context(force: bool) -> Context {
        let config = PipelineConfig::default();
        Context {
            digest: config.digest(),
            config,
            out_dir: PathBuf::from("out"),
            force,
            clock: Utc.timestamp_opt(0, 0).unwrap(),
        }
    }

    #[test]
    fn digest_mismatch_is_refused_unless_forced() {
        let strict = context(false);
        assert!(strict.check_digest("plan.json", &strict.digest.clone()).is_ok());
        let err = strict.check_digest("plan.json", "0000000000000000").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(context(true).check_digest("plan.json", "0000000000000000").is_ok());
    }

    #[test]
    fn seed_corpus_is_cleaned_and_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seeds.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"question\": \"عندي صداع 😷 شديد\", \"answer\": \"اشرب الماء\"}\n",
                "{\"question\": \"عندي  صداع شديد\", \"answer\": \"اشرب الماء\", \"category\": \"neurology\"}\n",
                "{\"question\": \"ابني عنده حرارة\", \"answer\": \"خافض حرارة\", \"category\": \"pediatrics\"}\n",
            ),
        )
        .unwrap();
        let seeds = load_seed_corpus(&path, None, Utc.timestamp_opt(0, 0).unwrap()).unwrap();
        assert_eq!(seeds.len(), 2);
        assert_eq!(seeds[0].question, "عندي صداع شديد");
        assert_eq!(seeds[0].source, Source::Real);
        assert_eq!(seeds[1].category, "pediatrics");
    }

    #[test]
    fn empty_seed_text_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seeds.jsonl");
        std::fs::write(&path, "{\"question\": \"😷\", \"answer\": \"نعم\"}\n").unwrap();
        let err = load_seed_corpus(&path, None, Utc::now()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
