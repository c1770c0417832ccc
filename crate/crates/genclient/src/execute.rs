//! Drives a generation plan through providers with per-source rate limits,
//! bounded concurrency, retries and an append-only checkpoint.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use medaug_core::completion::RawCompletion;
use medaug_core::config::ProviderSettings;
use medaug_core::dedup::{hash64, mix64};
use medaug_core::promptgen::{GenerationPlan, GenerationRequest};
use medaug_core::Source;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::sync::{mpsc, Semaphore};
use tokio::task::JoinSet;
use tokio::time::Instant;

use crate::provider::{Provider, ProviderError};
use crate::ratelimit::{backoff_delay, TokenBucket};

#[derive(Debug, Error)]
pub enum ExecuteError {
    #[error("no provider configured for source {0}")]
    MissingProvider(Source),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Checkpoint { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExecuteError + '_ {
    move |source| ExecuteError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Limits for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceLimits {
    pub requests_per_second: f64,
    pub concurrency: usize,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl From<&ProviderSettings> for SourceLimits {
    fn from(s: &ProviderSettings) -> Self {
        Self {
            requests_per_second: s.requests_per_second,
            concurrency: s.concurrency.max(1),
            max_attempts: s.max_attempts.max(1),
            backoff_base: Duration::from_millis(s.backoff_base_ms),
            timeout: Duration::from_millis(s.timeout_ms),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    pub limits: BTreeMap<Source, SourceLimits>,
}

impl ExecuteOptions {
    fn limits(&self, source: Source) -> SourceLimits {
        self.limits
            .get(&source)
            .cloned()
            .unwrap_or_else(|| SourceLimits::from(&ProviderSettings::default()))
    }
}

/// A request that exhausted its attempts or failed permanently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub request_id: String,
    pub source: Source,
    pub attempts: u32,
    pub transient: bool,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExecuteSummary {
    pub resumed: usize,
    pub completed: usize,
    pub failed: usize,
    pub per_source: BTreeMap<Source, usize>,
}

/// Completions already on disk. A torn final line (a crash mid-write) is
/// dropped with a warning; a bad line anywhere else is an error.
pub fn load_checkpoint(path: &Path) -> Result<Vec<RawCompletion>, ExecuteError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(path))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawCompletion>(line) {
            Ok(c) => out.push(c),
            Err(e) if Some(i) == last => {
                tracing::warn!(path = %path.display(), line = i + 1, error = %e, "dropping torn checkpoint line");
            }
            Err(e) => {
                return Err(ExecuteError::Checkpoint {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn write_lines_atomic<T: Serialize>(items: &[T], path: &Path) -> Result<(), ExecuteError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io_err(&tmp))?);
        for item in items {
            serde_json::to_writer(&mut f, item).expect("serializable");
            f.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        f.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

struct Lane {
    provider: Arc<dyn Provider>,
    bucket: TokenBucket,
    permits: Semaphore,
    limits: SourceLimits,
}

async fn run_one(lane: Arc<Lane>, request: GenerationRequest) -> Result<RawCompletion, Failure> {
    let _permit = lane.permits.acquire().await.expect("semaphore is never closed");
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(hash64(request.request_id.as_bytes())));
    let mut attempt = 0;
    loop {
        attempt += 1;
        lane.bucket.acquire().await;
        let started = Instant::now();
        let result = match tokio::time::timeout(lane.limits.timeout, lane.provider.complete(&request)).await {
            Ok(r) => r,
            Err(_) => Err(ProviderError::Transient(format!("timed out after {:?}", lane.limits.timeout))),
        };
        match result {
            Ok(raw_text) => {
                return Ok(RawCompletion {
                    request_id: request.request_id,
                    provider: request.source,
                    raw_text,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempt_count: attempt,
                })
            }
            Err(e) if e.is_transient() && attempt < lane.limits.max_attempts => {
                let delay = backoff_delay(lane.limits.backoff_base, attempt, rng.random::<f64>());
                tracing::debug!(request = %request.request_id, attempt, ?delay, error = %e, "retrying");
                tokio::time::sleep(delay).await;
            }
            Err(e) => {
                return Err(Failure {
                    request_id: request.request_id,
                    source: request.source,
                    attempts: attempt,
                    transient: e.is_transient(),
                    error: e.to_string(),
                })
            }
        }
    }
}

/// Runs every request of `plan` not already in `checkpoint`. New
/// completions are appended as they arrive; at the end the checkpoint is
/// rewritten sorted by request id and failures go to `failures_path`.
pub async fn execute(
    plan: &GenerationPlan,
    providers: &HashMap<Source, Arc<dyn Provider>>,
    options: &ExecuteOptions,
    checkpoint: &Path,
    failures_path: &Path,
) -> Result<ExecuteSummary, ExecuteError> {
    for source in plan.counts_by_source().keys() {
        if !providers.contains_key(source) {
            return Err(ExecuteError::MissingProvider(*source));
        }
    }
    let planned: HashSet<&str> = plan.requests.iter().map(|r| r.request_id.as_str()).collect();
    let mut done = load_checkpoint(checkpoint)?;
    done.retain(|c| planned.contains(c.request_id.as_str()));
    let mut seen = HashSet::new();
    done.retain(|c| seen.insert(c.request_id.clone()));
    // Rewrite so that appends start on a clean line.
    write_lines_atomic(&done, checkpoint)?;
    let resumed = done.len();

    let lanes: HashMap<Source, Arc<Lane>> = providers
        .iter()
        .map(|(&source, provider)| {
            let limits = options.limits(source);
            let lane = Lane {
                provider: provider.clone(),
                bucket: TokenBucket::new(limits.requests_per_second),
                permits: Semaphore::new(limits.concurrency),
                limits,
            };
            (source, Arc::new(lane))
        })
        .collect();

    let (tx, mut rx) = mpsc::channel::<RawCompletion>(256);
    let path = checkpoint.to_path_buf();
    let writer = tokio::spawn(async move {
        let mut file = tokio::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .await
            .map_err(io_err(&path))?;
        let mut written = Vec::new();
        while let Some(c) = rx.recv().await {
            let mut line = serde_json::to_vec(&c).expect("serializable");
            line.push(b'\n');
            file.write_all(&line).await.map_err(io_err(&path))?;
            file.flush().await.map_err(io_err(&path))?;
            written.push(c);
        }
        Ok::<_, ExecuteError>(written)
    });

    let mut tasks = JoinSet::new();
    for request in plan.requests.iter().filter(|r| !seen.contains(&r.request_id)) {
        let lane = lanes[&request.source].clone();
        let request = request.clone();
        let tx = tx.clone();
        tasks.spawn(async move {
            let outcome = run_one(lane, request).await;
            if let Ok(c) = &outcome {
                // The writer only stops once every sender is gone.
                let _ = tx.send(c.clone()).await;
            }
            outcome.err()
        });
    }
    drop(tx);
    let mut failures = Vec::new();
    while let Some(joined) = tasks.join_next().await {
        if let Some(f) = joined.expect("generation task panicked") {
            tracing::warn!(request = %f.request_id, error = %f.error, "request failed");
            failures.push(f);
        }
    }
    let written = writer.await.expect("checkpoint writer panicked")?;

    let completed = written.len();
    done.extend(written);
    done.sort_by(|a, b| a.request_id.cmp(&b.request_id));
    write_lines_atomic(&done, checkpoint)?;
    failures.sort_by(|a, b| a.request_id.cmp(&b.request_id));
    write_lines_atomic(&failures, failures_path)?;

    let mut per_source = BTreeMap::new();
    for c in &done {
        *per_source.entry(c.provider).or_insert(0) += 1;
    }
    Ok(ExecuteSummary {
        resumed,
        completed,
        failed: failures.len(),
        per_source,
    })
}
