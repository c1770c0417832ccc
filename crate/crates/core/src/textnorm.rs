//! Two-tier text normalization and Arabic language verification.
//!
//! [`surface_clean`] produces the text that is stored and trained on: social
//! media debris (URLs, mentions, hashtags, emoji, tatweel, repeated terminal
//! punctuation) is removed while orthography (hamza forms, teh marbuta,
//! diacritics) is left alone. [`canonical`] is the aggressive form used for
//! hashing, duplicate detection and script statistics, and is never stored.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

const TATWEEL: char = '\u{0640}';
const TERMINAL_PUNCT: [char; 5] = ['?', '!', '\u{061F}', '\u{061B}', '.'];
// Each pass only removes material or recomposes, so a handful of passes
// always reaches the fixpoint in practice.
const MAX_PASSES: usize = 8;

static URL_SCHEME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)[a-z][a-z0-9+.\-]*://\S*").unwrap());
// No word boundary: Arabic letters glued to the front of a URL are common.
static URL_WWW: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)www\.\S*").unwrap());
static EMAIL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{L}\p{N}._%+\-]+@[\p{L}\p{N}\-]+(?:\.[\p{L}\p{N}\-]+)+").unwrap());
static TAG_OR_MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(^|\s)[#@]\S*").unwrap());
static SYMBOLS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[\p{So}\p{Sk}\x{1F300}-\x{1FAFF}\x{2600}-\x{27BF}\x{FE0E}\x{FE0F}]").unwrap());
static CONTROLS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{Cc}--\s]").unwrap());
static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());

/// Surface cleaning for stored text. Total and idempotent.
pub fn surface_clean(text: &str) -> String {
    let mut current = surface_pass(text);
    for _ in 0..MAX_PASSES {
        let next = surface_pass(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn surface_pass(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let no_urls = URL_SCHEME.replace_all(&nfc, " ");
    let no_urls = URL_WWW.replace_all(&no_urls, " ");
    let no_mail = EMAIL.replace_all(&no_urls, " ");
    let no_tags = TAG_OR_MENTION.replace_all(&no_mail, "$1 ");
    let no_symbols = SYMBOLS.replace_all(&no_tags, "");
    let no_controls = CONTROLS.replace_all(&no_symbols, "");

    let mut out = String::with_capacity(no_controls.len());
    let mut prev: Option<char> = None;
    for c in no_controls.chars() {
        if c == TATWEEL {
            continue;
        }
        if TERMINAL_PUNCT.contains(&c) && prev == Some(c) {
            continue;
        }
        out.push(c);
        prev = Some(c);
    }
    collapse_whitespace(&out)
}

/// Canonical form used for ids, dedup keys and script statistics.
pub fn canonical(text: &str) -> String {
    let mut current = canonical_pass(&surface_clean(text));
    for _ in 0..MAX_PASSES {
        let next = canonical_pass(&surface_clean(&current));
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn canonical_pass(cleaned: &str) -> String {
    let mut mapped = String::with_capacity(cleaned.len());
    for c in cleaned.chars() {
        match c {
            '\u{064B}'..='\u{065F}' | '\u{0670}' => {}
            '\u{0649}' => mapped.push('\u{064A}'),
            '\u{0629}' => mapped.push('\u{0647}'),
            '\u{0622}' | '\u{0623}' | '\u{0625}' | '\u{0671}' => mapped.push('\u{0627}'),
            '\u{0660}'..='\u{0669}' => {
                let digit = c as u32 - 0x0660;
                mapped.push(char::from(b'0' + digit as u8));
            }
            c if is_latin_letter(c) => mapped.extend(c.to_lowercase()),
            c => mapped.push(c),
        }
    }
    let unpunctuated = PUNCTUATION.replace_all(&mapped, "");
    collapse_whitespace(&unpunctuated)
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

pub fn is_latin_letter(c: char) -> bool {
    if c.is_ascii_alphabetic() {
        return true;
    }
    let in_block = matches!(c,
        '\u{00C0}'..='\u{024F}'
        | '\u{1E00}'..='\u{1EFF}'
        | '\u{2C60}'..='\u{2C7F}'
        | '\u{A720}'..='\u{A7FF}'
        | '\u{FF21}'..='\u{FF3A}'
        | '\u{FF41}'..='\u{FF5A}');
    in_block && c.is_alphabetic()
}

pub fn is_arabic_letter(c: char) -> bool {
    let in_block = matches!(c,
        '\u{0600}'..='\u{06FF}'
        | '\u{0750}'..='\u{077F}'
        | '\u{08A0}'..='\u{08FF}'
        | '\u{FB50}'..='\u{FDFF}'
        | '\u{FE70}'..='\u{FEFF}');
    in_block && is_letter(c)
}

fn is_arabic_mark(c: char) -> bool {
    matches!(c,
        '\u{0610}'..='\u{061A}'
        | '\u{064B}'..='\u{065F}'
        | '\u{0670}'
        | '\u{06D6}'..='\u{06ED}'
        | '\u{08D3}'..='\u{08FF}')
}

fn is_letter(c: char) -> bool {
    c.is_alphabetic() && !is_arabic_mark(c)
}

/// Thresholds for [`verify_language`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangConfig {
    /// Minimum share of Arabic-script letters (θ).
    pub arabic_ratio_min: f64,
    /// A Latin letter run of this length or longer is code-switching (L).
    pub latin_run_max: usize,
    /// Minimum number of letters for a verdict (M).
    pub min_letters: usize,
}

impl Default for LangConfig {
    fn default() -> Self {
        Self {
            arabic_ratio_min: 0.90,
            latin_run_max: 4,
            min_letters: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangOutcome {
    Pass,
    CodeSwitch,
    InsufficientLetters,
    NonArabic,
}

impl LangOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            LangOutcome::Pass => "pass",
            LangOutcome::CodeSwitch => "code_switch",
            LangOutcome::InsufficientLetters => "insufficient_letters",
            LangOutcome::NonArabic => "non_arabic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangVerdict {
    pub arabic_ratio: f64,
    pub letter_count: usize,
    pub latin_run_max: usize,
    pub outcome: LangOutcome,
}

/// Script statistics on the canonical form of `text`, with outcome
/// precedence insufficient_letters, code_switch, non_arabic, pass.
pub fn verify_language(text: &str, config: &LangConfig) -> LangVerdict {
    let canon = canonical(text);
    let mut letters = 0usize;
    let mut arabic = 0usize;
    let mut run = 0usize;
    let mut longest_run = 0usize;
    for c in canon.chars() {
        if is_latin_letter(c) {
            run += 1;
            longest_run = longest_run.max(run);
        } else {
            run = 0;
        }
        if is_letter(c) {
            letters += 1;
            if is_arabic_letter(c) {
                arabic += 1;
            }
        }
    }
    let arabic_ratio = if letters == 0 { 0.0 } else { arabic as f64 / letters as f64 };
    let outcome = if letters < config.min_letters {
        LangOutcome::InsufficientLetters
    } else if longest_run >= config.latin_run_max {
        LangOutcome::CodeSwitch
    } else if arabic_ratio < config.arabic_ratio_min {
        LangOutcome::NonArabic
    } else {
        LangOutcome::Pass
    };
    LangVerdict {
        arabic_ratio,
        letter_count: letters,
        latin_run_max: longest_run,
        outcome,
    }
}
