//! Embedding providers and the semantic band filter.
//!
//! Synthetic records are compared against an index of seed embeddings. A
//! record whose mean similarity to its nearest seeds falls below `tau_low`
//! is off-domain; above `tau_high` it is a near-copy of the seed set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::{hash64, mix64};
use crate::record::QARecord;
use crate::scalar::Scalar;
use crate::textnorm::canonical;

/// Dimension of [`DeterministicEmbedder`] vectors.
pub const DETERMINISTIC_DIM: usize = 64;
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("empty_text: no tokens after canonicalization")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("seed index is empty")]
    EmptyIndex,
    #[error("embedding is not unit-norm or has non-finite components")]
    NotNormalized,
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S> {
    values: Vec<S>,
}

impl<S: Scalar> Embedding<S> {
    /// Normalizes `values` to unit length. Fails on zero or non-finite input.
    pub fn normalized(mut values: Vec<S>) -> Result<Self, EmbedError> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm == S::zero() {
            return Err(EmbedError::NotNormalized);
        }
        for v in &mut values {
            *v = *v / norm;
        }
        Ok(Self { values })
    }

    /// Wraps a vector that should already be unit-norm (within 1e-6 for
    /// `f32`, 1e-9 for `f64`).
    pub fn from_unit(values: Vec<S>) -> Result<Self, EmbedError> {
        let tol = if std::mem::size_of::<S>() == 4 { 1e-6 } else { 1e-9 };
        let norm = l2_norm(&values).as_f64();
        if values.iter().any(|v| !v.is_finite()) || (norm - 1.0).abs() > tol {
            return Err(EmbedError::NotNormalized);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn cast<T: Scalar>(&self) -> Embedding<T> {
        Embedding {
            values: self.values.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

fn l2_norm<S: Scalar>(values: &[S]) -> S {
    values.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt()
}

/// Dot product of two unit vectors.
pub fn cosine<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>) -> Result<S, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(dot(&a.values, &b.values))
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Source of sentence and token embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding<f64>>, EmbedError>;

    /// Per-token vectors for similarity scoring, together with the tokens.
    /// `seed` lets stochastic providers vary between repeated runs.
    fn embed_tokens(&self, text: &str, seed: u64) -> Result<(Vec<String>, Vec<Embedding<f64>>), EmbedError>;

    /// Tokenization matching `embed_tokens`, used for idf statistics.
    fn tokenize(&self, text: &str) -> Vec<String> {
        DeterministicEmbedder::tokens(text)
    }

    fn name(&self) -> &str;
}

/// Offline hash-based provider; bit-exact on any IEEE-754 platform.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeterministicEmbedder;

fn unit_interval(z: u64) -> f64 {
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl DeterministicEmbedder {
    /// Unit-norm vector for a single token.
    pub fn token_vector(token: &str) -> Vec<f64> {
        let h = hash64(token.as_bytes());
        let raw: Vec<f64> = (0..DETERMINISTIC_DIM as u64)
            .map(|i| unit_interval(mix64(h.wrapping_add(i.wrapping_mul(GOLDEN_GAMMA)))) * 2.0 - 1.0)
            .collect();
        let norm = raw.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
        raw.into_iter().map(|v| v / norm).collect()
    }

    pub fn tokens(text: &str) -> Vec<String> {
        canonical(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
    }

    /// Normalized mean of the token vectors, summed in token order.
    pub fn embed(text: &str) -> Result<Embedding<f64>, EmbedError> {
        let tokens = Self::tokens(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut sum = vec![0.0f64; DETERMINISTIC_DIM];
        for token in &tokens {
            for (acc, v) in sum.iter_mut().zip(Self::token_vector(token)) {
                *acc += v;
            }
        }
        let n = tokens.len() as f64;
        for v in &mut sum {
            *v /= n;
        }
        Embedding::normalized(sum)
    }
}

impl EmbeddingProvider for DeterministicEmbedder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding<f64>>, EmbedError> {
        texts.par_iter().map(|t| Self::embed(t)).collect()
    }

    fn embed_tokens(&self, text: &str, _seed: u64) -> Result<(Vec<String>, Vec<Embedding<f64>>), EmbedError> {
        let tokens = Self::tokens(text);
        let vectors = tokens
            .iter()
            .map(|t| Embedding {
                values: Self::token_vector(t),
            })
            .collect();
        Ok((tokens, vectors))
    }

    fn name(&self) -> &str {
        "deterministic"
    }
}

/// Wraps [`DeterministicEmbedder::embed`] for convenience.
pub fn embed_deterministic(text: &str) -> Result<Embedding<f64>, EmbedError> {
    DeterministicEmbedder::embed(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterTarget {
    QuestionOnly,
    Pair,
}

impl FilterTarget {
    pub fn text_of(self, question: &str, answer: &str) -> String {
        match self {
            FilterTarget::QuestionOnly => question.to_string(),
            FilterTarget::Pair => format!("{question} {answer}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub tau_low: f64,
    pub tau_high: f64,
    pub k_nn: usize,
    pub target: FilterTarget,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_low: 0.55,
            tau_high: 0.95,
            k_nn: 5,
            target: FilterTarget::QuestionOnly,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau_low < self.tau_high) {
            return Err(format!("tau_low ({}) must be below tau_high ({})", self.tau_low, self.tau_high));
        }
        if self.k_nn == 0 {
            return Err("k_nn must be at least 1".into());
        }
        Ok(())
    }
}

/// Read-only index of seed embeddings, searched by full scan.
#[derive(Debug, Clone)]
pub struct SeedIndex<S> {
    ids: Vec<String>,
    vectors: Vec<Embedding<S>>,
}

impl<S: Scalar> SeedIndex<S> {
    pub fn new(ids: Vec<String>, vectors: Vec<Embedding<S>>) -> Result<Self, EmbedError> {
        if let Some(first) = vectors.first() {
            if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
                return Err(EmbedError::DimMismatch(first.dim(), bad.dim()));
            }
        }
        assert_eq!(ids.len(), vectors.len(), "one id per vector");
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Mean cosine of the `k_nn` most similar seeds (all seeds when the
    /// index is smaller).
    pub fn seed_similarity(&self, candidate: &Embedding<S>, k_nn: usize) -> Result<S, EmbedError> {
        if self.is_empty() {
            return Err(EmbedError::EmptyIndex);
        }
        let mut sims = self.vectors.iter().map(|v| cosine(candidate, v)).collect::<Result<Vec<S>, _>>()?;
        let k = k_nn.clamp(1, sims.len());
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, |a, b| b.partial_cmp(a).expect("finite cosines"));
            sims.truncate(k);
        }
        sims.sort_by(|a, b| b.partial_cmp(a).expect("finite cosines"));
        let total = sims.iter().fold(S::zero(), |acc, &v| acc + v);
        Ok(total / S::from_usize(k))
    }
}

impl SeedIndex<f64> {
    /// Embeds the target text of every seed record.
    pub fn build(seeds: &[QARecord], provider: &dyn EmbeddingProvider, target: FilterTarget) -> Result<Self, EmbedError> {
        if seeds.is_empty() {
            return Err(EmbedError::EmptyIndex);
        }
        let texts: Vec<String> = seeds.iter().map(|r| target.text_of(&r.question, &r.answer)).collect();
        let vectors = provider.embed_texts(&texts)?;
        Self::new(seeds.iter().map(|r| r.id.clone()).collect(), vectors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Accept,
    OffDomain,
    NearCopy,
}

impl FilterDecision {
    pub fn reason(self) -> Option<&'static str> {
        match self {
            FilterDecision::Accept => None,
            FilterDecision::OffDomain => Some("off_domain"),
            FilterDecision::NearCopy => Some("near_copy"),
        }
    }
}

/// Band decision for a similarity score; both bounds inclusive.
pub fn band_decision(similarity: f64, config: &FilterConfig) -> FilterDecision {
    if similarity < config.tau_low {
        FilterDecision::OffDomain
    } else if similarity > config.tau_high {
        FilterDecision::NearCopy
    } else {
        FilterDecision::Accept
    }
}

/// Embeds the record's target text, scores it against the index and
/// records the score as `metrics.semantic_sim`.
pub fn semantic_filter(
    record: &mut QARecord,
    index: &SeedIndex<f64>,
    provider: &dyn EmbeddingProvider,
    config: &FilterConfig,
) -> Result<FilterDecision, EmbedError> {
    let text = config.target.text_of(&record.question, &record.answer);
    let embedding = provider
        .embed_texts(std::slice::from_ref(&text))?
        .pop()
        .ok_or_else(|| EmbedError::Provider("provider returned no vectors".into()))?;
    let s = index.seed_similarity(&embedding, config.k_nn)?;
    record.metrics.insert("semantic_sim".into(), s);
    Ok(band_decision(s, config))
}
