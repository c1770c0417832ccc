use async_trait::async_trait;
use medaug_core::promptgen::GenerationRequest;
use medaug_core::Source;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    /// Worth retrying: rate limits, server errors, timeouts, dropped connections.
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

/// A chat-completion backend. Returns the raw assistant text.
#[async_trait]
pub trait Provider: Send + Sync {
    fn source(&self) -> Source;

    async fn complete(&self, request: &GenerationRequest) -> Result<String, ProviderError>;
}
