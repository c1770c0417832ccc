//! Raw provider completions and extraction of the question–answer object.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::Source;

/// One provider response as captured by the generation client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub request_id: String,
    pub provider: Source,
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found")]
    NoObject,
    #[error("unterminated JSON object")]
    Unterminated,
    #[error("no object with string fields \"question\" and \"answer\": {0}")]
    Schema(String),
}

#[derive(Deserialize)]
struct Pair {
    question: String,
    answer: String,
}

/// Extracts `(question, answer)` from the first balanced JSON object in
/// `raw_text` that has both string fields. Code fences and surrounding prose
/// are ignored. Never panics.
pub fn parse_completion(raw_text: &str) -> Result<(String, String), ParseError> {
    let mut start = 0;
    let mut last_error: Option<ParseError> = None;
    while let Some(offset) = raw_text[start..].find('{') {
        let open = start + offset;
        match balanced_end(&raw_text[open..]) {
            Some(len) => {
                let candidate = &raw_text[open..open + len];
                match serde_json::from_str::<Pair>(candidate) {
                    Ok(pair) => return Ok((pair.question, pair.answer)),
                    Err(e) => {
                        last_error.get_or_insert(ParseError::Schema(e.to_string()));
                    }
                }
                start = open + len;
            }
            None => {
                last_error.get_or_insert(ParseError::Unterminated);
                start = open + 1;
            }
        }
    }
    Err(last_error.unwrap_or(ParseError::NoObject))
}

/// Byte length of the brace-balanced object starting at `text[0] == '{'`,
/// honoring JSON string literals and escapes.
fn balanced_end(text: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in text.bytes().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}
