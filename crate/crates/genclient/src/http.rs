//! JSON-over-HTTP clients: chat completions and an embedding service.

use std::time::Duration;

use async_trait::async_trait;
use medaug_core::config::ProviderSettings;
use medaug_core::embed::{EmbedError, Embedding, EmbeddingProvider};
use medaug_core::promptgen::GenerationRequest;
use medaug_core::Source;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::provider::{Provider, ProviderError};

/// Chat endpoint client. Accepts OpenAI-, Gemini- and Anthropic-shaped
/// responses so one client covers the common gateways.
pub struct HttpChatProvider {
    source: Source,
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_tokens: u32,
}

impl HttpChatProvider {
    pub fn new(
        source: Source,
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        temperature: f64,
        max_tokens: u32,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Permanent(format!("http client: {e}")))?;
        Ok(Self {
            source,
            client,
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            temperature,
            max_tokens,
        })
    }

    /// Builds a client from configuration, reading the key from the
    /// environment variable the settings name.
    pub fn from_settings(source: Source, settings: &ProviderSettings) -> Result<Self, ProviderError> {
        let endpoint = settings
            .endpoint
            .clone()
            .ok_or_else(|| ProviderError::Permanent(format!("{source}: no endpoint configured")))?;
        let api_key = match &settings.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| ProviderError::Permanent(format!("{source}: environment variable {var} is not set")))?)
            }
            None => None,
        };
        let model = settings.model.clone().unwrap_or_else(|| source.as_str().to_string());
        Self::new(
            source,
            endpoint,
            model,
            api_key,
            settings.temperature,
            settings.max_tokens,
            Duration::from_millis(settings.timeout_ms),
        )
    }
}

/// Pulls the assistant text out of a chat response body.
pub fn extract_content(body: &Value) -> Option<String> {
    if let Some(s) = body.pointer("/choices/0/message/content").and_then(Value::as_str) {
        return Some(s.to_string());
    }
    if let Some(parts) = body.pointer("/candidates/0/content/parts").and_then(Value::as_array) {
        let text: String = parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect();
        return Some(text);
    }
    if let Some(blocks) = body.get("content").and_then(Value::as_array) {
        let text: String = blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str).is_none_or(|t| t == "text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect();
        return Some(text);
    }
    None
}

fn classify_status(status: reqwest::StatusCode, body: &str) -> ProviderError {
    let snippet: String = body.chars().take(200).collect();
    let msg = format!("HTTP {status}: {snippet}");
    if status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error() {
        ProviderError::Transient(msg)
    } else {
        ProviderError::Permanent(msg)
    }
}

#[async_trait]
impl Provider for HttpChatProvider {
    fn source(&self) -> Source {
        self.source
    }

    async fn complete(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let mut call = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().await.map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status();
        let text = response.text().await.map_err(|e| ProviderError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(classify_status(status, &text));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Transient(format!("invalid JSON body: {e}")))?;
        extract_content(&value).ok_or_else(|| ProviderError::Permanent("response has no recognizable content".into()))
    }
}

/// Client for an embedding service exposing `POST /embed` and
/// `POST /embed_tokens`. Blocking; do not call from inside an async runtime.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    base: String,
    api_key: Option<String>,
    batch: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

#[derive(Deserialize)]
struct TokenResponse {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl HttpEmbedder {
    pub fn new(base: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        Ok(Self {
            client,
            base: base.into().trim_end_matches('/').to_string(),
            api_key,
            batch: 64,
        })
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: &Value) -> Result<T, EmbedError> {
        let mut call = self.client.post(format!("{}{path}", self.base)).json(body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| EmbedError::Provider(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbedError::Provider(format!("{path}: HTTP {status}")));
        }
        response.json().map_err(|e| EmbedError::Provider(format!("{path}: {e}")))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding<f64>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch) {
            let r: EmbedResponse = self.post("/embed", &json!({ "texts": chunk }))?;
            if r.vectors.len() != chunk.len() {
                return Err(EmbedError::Provider(format!(
                    "sent {} texts, got {} vectors",
                    chunk.len(),
                    r.vectors.len()
                )));
            }
            for v in r.vectors {
                if v.len() != r.dim {
                    return Err(EmbedError::DimMismatch(r.dim, v.len()));
                }
                out.push(Embedding::normalized(v)?);
            }
        }
        Ok(out)
    }

    fn embed_tokens(&self, text: &str, seed: u64) -> Result<(Vec<String>, Vec<Embedding<f64>>), EmbedError> {
        let r: TokenResponse = self.post("/embed_tokens", &json!({ "text": text, "seed": seed }))?;
        if r.tokens.len() != r.vectors.len() {
            return Err(EmbedError::Provider(format!(
                "{} tokens but {} vectors",
                r.tokens.len(),
                r.vectors.len()
            )));
        }
        let vectors = r.vectors.into_iter().map(Embedding::normalized).collect::<Result<_, _>>()?;
        Ok((r.tokens, vectors))
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        match self.embed_tokens(text, 0) {
            Ok((tokens, _)) => tokens,
            Err(e) => {
                tracing::warn!(error = %e, "tokenize via service failed, using local tokenization");
                medaug_core::embed::DeterministicEmbedder::tokens(text)
            }
        }
    }

    fn name(&self) -> &str {
        "http"
    }
}
