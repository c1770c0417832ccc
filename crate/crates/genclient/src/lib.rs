//! Generation backends and the executor that drives a plan through them.
//!
//! Live providers speak JSON over HTTP; [`MockProvider`] produces seeded
//! Arabic completions offline so the whole pipeline runs without network.

pub mod execute;
pub mod http;
pub mod mock;
pub mod provider;
pub mod ratelimit;

pub use execute::{execute, load_checkpoint, ExecuteOptions, ExecuteSummary, Failure};
pub use http::{HttpChatProvider, HttpEmbedder};
pub use mock::MockProvider;
pub use provider::{Provider, ProviderError};
pub use ratelimit::{backoff_delay, TokenBucket};
