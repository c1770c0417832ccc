//! Offline provider: seeded Arabic completions recombined from exemplar
//! spans and a small medical vocabulary, wrapped the way chat models tend to wrap
//! JSON (bare, fenced, or inside prose), with a configurable share of
//! unusable replies.

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use medaug_core::dedup::{hash64, mix64};
use medaug_core::promptgen::GenerationRequest;
use medaug_core::{QARecord, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::provider::{Provider, ProviderError};

const VOCAB: &[&str] = &[
    "ألم",
    "صداع",
    "حرارة",
    "سعال",
    "دوخة",
    "غثيان",
    "تعب",
    "ضغط",
    "سكر",
    "قلب",
    "معدة",
    "ظهر",
    "رأس",
    "صدر",
    "حلق",
    "جلد",
    "حساسية",
    "التهاب",
    "دواء",
    "جرعة",
    "تحليل",
    "فحص",
    "طبيب",
    "مستشفى",
    "علاج",
    "راحة",
    "نوم",
    "ماء",
    "غذاء",
    "رياضة",
    "وزن",
    "دم",
    "أعراض",
    "مزمن",
    "حاد",
    "يومي",
    "أسبوع",
    "شهر",
    "مساء",
    "صباح",
    "طفل",
    "حامل",
    "كبير",
    "مضاد",
    "حيوي",
    "مسكن",
    "فيتامين",
    "حديد",
    "نقص",
    "زيادة",
    "تورم",
    "احمرار",
    "حكة",
    "إسهال",
    "إمساك",
    "قيء",
    "نزيف",
    "كسر",
    "عضلات",
    "مفاصل",
    "أعصاب",
    "قلق",
    "اكتئاب",
    "تنفس",
    "ربو",
    "أنف",
    "أذن",
    "عين",
    "أسنان",
    "لثة",
    "كلى",
    "كبد",
    "مرارة",
    "غدة",
    "هرمون",
    "مناعة",
    "عدوى",
    "فيروس",
    "بكتيريا",
    "لقاح",
];

const REFUSALS: &[&str] = &["عذرًا، لا أستطيع تقديم نصيحة طبية.", "I'm sorry, I can't help with that request.", ""];

pub struct MockProvider {
    source: Source,
    seeds: Arc<HashMap<String, QARecord>>,
    master_seed: u64,
    malformed_rate: f64,
}

impl MockProvider {
    pub fn new(source: Source, seeds: Arc<HashMap<String, QARecord>>, master_seed: u64, malformed_rate: f64) -> Self {
        Self {
            source,
            seeds,
            master_seed,
            malformed_rate: malformed_rate.clamp(0.0, 1.0),
        }
    }

    /// The reply for `request`; a pure function of the request id, its
    /// exemplars, the source and the master seed.
    pub fn reply(&self, request: &GenerationRequest) -> String {
        let salt = hash64(self.source.as_str().as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.master_seed ^ hash64(request.request_id.as_bytes()) ^ salt));
        if rng.random::<f64>() < self.malformed_rate {
            return malformed(&mut rng);
        }
        let exemplars: Vec<&QARecord> = request.exemplar_ids.iter().filter_map(|id| self.seeds.get(id)).collect();
        let pick = |rng: &mut ChaCha8Rng| (!exemplars.is_empty()).then(|| exemplars[rng.random_range(0..exemplars.len())]);

        // Two exemplar spans glued together plus a little fresh vocabulary.
        let mut question = span(pick(&mut rng).map(|r| r.question.as_str()), 3..6, &mut rng);
        question.extend(span(pick(&mut rng).map(|r| r.question.as_str()), 2..5, &mut rng));
        question.extend(words(&mut rng, 1..3));
        let mut answer = span(pick(&mut rng).map(|r| r.answer.as_str()), 6..11, &mut rng);
        answer.extend(span(pick(&mut rng).map(|r| r.answer.as_str()), 4..8, &mut rng));
        answer.extend(words(&mut rng, 2..5));
        let object = serde_json::json!({
            "question": format!("{}؟", question.join(" ")),
            "answer": format!("{}.", answer.join(" ")),
        });
        let body = if rng.random_bool(0.5) {
            serde_json::to_string(&object)
        } else {
            serde_json::to_string_pretty(&object)
        }
        .expect("json object");
        match rng.random_range(0..10) {
            0..=5 => body,
            6..=7 => format!("```json\n{body}\n```"),
            _ => format!("إليك زوج السؤال والجواب المطلوب:\n{body}\nأتمنى أن يكون مفيدًا."),
        }
    }
}

fn words(rng: &mut ChaCha8Rng, count: std::ops::Range<usize>) -> Vec<String> {
    let n = rng.random_range(count);
    (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string()).collect()
}

/// A run of consecutive words from `text`, or vocabulary words when there
/// is no exemplar.
fn span(text: Option<&str>, len: std::ops::Range<usize>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let tokens: Vec<&str> = text.map(|t| t.split_whitespace().collect()).unwrap_or_default();
    if tokens.is_empty() {
        return words(rng, len);
    }
    let want = rng.random_range(len).min(tokens.len());
    let start = rng.random_range(0..=tokens.len() - want);
    tokens[start..start + want].iter().map(|s| s.to_string()).collect()
}

fn malformed(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => REFUSALS[rng.random_range(0..REFUSALS.len())].to_string(),
        1 => "{\"question\": \"عندي ألم في الصدر منذ يومين\", \"answer\": \"يجب".to_string(),
        _ => "{\"question\": \"ما سبب الصداع\", \"reply\": \"قلة النوم\"}".to_string(),
    }
}

#[async_trait]
impl Provider for MockProvider {
    fn source(&self) -> Source {
        self.source
    }

    async fn complete(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        Ok(self.reply(request))
    }
}
