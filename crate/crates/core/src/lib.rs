//! Core library for expanding a seed corpus of Arabic patient–doctor
//! question–answer pairs into a curated training corpus.
//!
//! Similarity math (embeddings, cosine, greedy token matching) is generic
//! over [`Scalar`]; the aliases below fix it to `f64`, the precision used by
//! the pipeline and its reports.

pub mod assemble;
pub mod completion;
pub mod config;
pub mod curate;
pub mod dedup;
pub mod embed;
pub mod promptgen;
pub mod record;
pub mod review;
pub mod scalar;
pub mod score;
pub mod textnorm;

pub use record::{compute_record_id, CurationStatus, QARecord, Source, Stage};
pub use scalar::Scalar;

pub type Embedding = embed::Embedding<f64>;
pub type Embedding32 = embed::Embedding<f32>;
pub type SeedIndex = embed::SeedIndex<f64>;
