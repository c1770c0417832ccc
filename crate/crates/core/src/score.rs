//! BERTScore-style evaluation: greedy token matching on embeddings,
//! corpus aggregation over repeated seeded runs, and comparison tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{dot, EmbedError, Embedding, EmbeddingProvider};
use crate::record::{read_jsonl, read_jsonl_values, JsonlError, QARecord};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("prediction {0} has no reference")]
    MissingReference(String),
    #[error("prediction id {0} appears more than once")]
    DuplicatePrediction(String),
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("comparison needs at least one model and two configurations (got {models} and {configurations})")]
    TooFewColumns { models: usize, configurations: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },
}

/// Tokens of one text with their unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings<S> {
    pub tokens: Vec<String>,
    pub vectors: Vec<Embedding<S>>,
}

impl<S: Scalar> TokenEmbeddings<S> {
    pub fn new(tokens: Vec<String>, vectors: Vec<Embedding<S>>) -> Self {
        assert_eq!(tokens.len(), vectors.len(), "one vector per token");
        Self { tokens, vectors }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Inverse document frequency over a reference corpus:
/// `idf(w) = ln((N + 1) / (1 + df(w)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfWeights {
    docs: usize,
    df: HashMap<String, usize>,
}

impl IdfWeights {
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0;
        for doc in docs {
            n += 1;
            let distinct: HashSet<&String> = doc.iter().collect();
            for t in distinct {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        Self { docs: n, df }
    }

    pub fn weight(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((self.docs as f64 + 1.0) / (1.0 + df as f64)).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore<S> {
    pub precision: S,
    pub recall: S,
    pub f1: S,
    /// Set when either side had no tokens; all three scores are then zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

pub fn f1_of<S: Scalar>(p: S, r: S) -> S {
    let sum = p + r;
    if sum > S::zero() {
        S::of(2.0) * p * r / sum
    } else {
        S::zero()
    }
}

fn weighted_mean<S: Scalar>(values: &[S], weights: Option<Vec<f64>>) -> S {
    match weights {
        Some(w) if w.iter().sum::<f64>() > 0.0 => {
            let total: f64 = w.iter().sum();
            let acc = values.iter().zip(&w).fold(S::zero(), |acc, (&v, &wi)| acc + v * S::of(wi));
            acc / S::of(total)
        }
        // All-zero idf weights (every token in every reference) fall back to
        // the plain mean.
        _ => values.iter().fold(S::zero(), |acc, &v| acc + v) / S::from_usize(values.len()),
    }
}

/// Greedy matching: precision averages each candidate token's best cosine
/// against the reference, recall each reference token's best against the
/// candidate.
pub fn pair_score<S: Scalar>(candidate: &TokenEmbeddings<S>, reference: &TokenEmbeddings<S>, idf: Option<&IdfWeights>) -> PairScore<S> {
    if candidate.is_empty() || reference.is_empty() {
        return PairScore {
            precision: S::zero(),
            recall: S::zero(),
            f1: S::zero(),
            empty: true,
        };
    }
    let k = candidate.vectors.len();
    let m = reference.vectors.len();
    let mut best_for_candidate = vec![S::neg_infinity(); k];
    let mut best_for_reference = vec![S::neg_infinity(); m];
    for (i, x) in candidate.vectors.iter().enumerate() {
        for (j, y) in reference.vectors.iter().enumerate() {
            let sim = dot(x.values(), y.values());
            if sim > best_for_candidate[i] {
                best_for_candidate[i] = sim;
            }
            if sim > best_for_reference[j] {
                best_for_reference[j] = sim;
            }
        }
    }
    let weights = |tokens: &[String]| idf.map(|w| tokens.iter().map(|t| w.weight(t)).collect::<Vec<f64>>());
    let precision = weighted_mean(&best_for_candidate, weights(&candidate.tokens));
    let recall = weighted_mean(&best_for_reference, weights(&reference.tokens));
    PairScore {
        precision,
        recall,
        f1: f1_of(precision, recall),
        empty: false,
    }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub output_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pairs: Vec<ScoredPair>,
}

/// Mean and standard deviation across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stddev: f64,
}

impl Aggregate {
    /// Sample standard deviation (n − 1); zero for a single run.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub idf: bool,
    pub provider: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub configuration: String,
    pub config: ScoreConfig,
    pub precision: Aggregate,
    pub recall: Aggregate,
    pub f1: Aggregate,
    pub runs: Vec<RunScore>,
}

impl ScoreReport {
    pub fn to_row(&self) -> ScoreRow {
        ScoreRow {
            model: self.model.clone(),
            configuration: self.configuration.clone(),
            precision: Some(self.precision.mean),
            recall: Some(self.recall.mean),
            f1: Some(self.f1.mean),
            stddev: Some(self.f1.stddev),
        }
    }
}

fn embed_tokens(provider: &dyn EmbeddingProvider, text: &str, seed: u64) -> Result<TokenEmbeddings<f64>, EmbedError> {
    let (tokens, vectors) = provider.embed_tokens(text, seed)?;
    Ok(TokenEmbeddings::new(tokens, vectors))
}

/// Scores predictions against reference answers, once per seed. Pairs are
/// processed in id order so the report does not depend on file order.
pub fn corpus_score(
    predictions: &[Prediction],
    references: &[QARecord],
    provider: &dyn EmbeddingProvider,
    seeds: &[u64],
    use_idf: bool,
    model: &str,
    configuration: &str,
) -> Result<ScoreReport, ScoreError> {
    if seeds.is_empty() {
        return Err(ScoreError::NoSeeds);
    }
    let refs: HashMap<&str, &QARecord> = references.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut seen = HashSet::new();
    for p in predictions {
        if !refs.contains_key(p.id.as_str()) {
            return Err(ScoreError::MissingReference(p.id.clone()));
        }
        if !seen.insert(p.id.as_str()) {
            return Err(ScoreError::DuplicatePrediction(p.id.clone()));
        }
    }
    let mut ordered: Vec<&Prediction> = predictions.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let idf = use_idf.then(|| {
        let docs: Vec<Vec<String>> = references.iter().map(|r| provider.tokenize(&r.answer)).collect();
        IdfWeights::from_documents(docs.iter().map(Vec::as_slice))
    });

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let reference_tokens: Vec<TokenEmbeddings<f64>> = ordered
            .iter()
            .map(|p| embed_tokens(provider, &refs[p.id.as_str()].answer, seed))
            .collect::<Result<_, _>>()?;
        let mut pairs = Vec::with_capacity(ordered.len());
        for (p, reference) in ordered.iter().zip(&reference_tokens) {
            let candidate = embed_tokens(provider, &p.output_text, seed)?;
            let s = pair_score(&candidate, reference, idf.as_ref());
            pairs.push(ScoredPair {
                id: p.id.clone(),
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                empty: s.empty,
            });
        }
        let n = pairs.len().max(1) as f64;
        runs.push(RunScore {
            seed,
            precision: pairs.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: pairs.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: pairs.iter().map(|p| p.f1).sum::<f64>() / n,
            pairs,
        });
    }
    let collect = |f: fn(&RunScore) -> f64| Aggregate::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(ScoreReport {
        model: model.to_string(),
        configuration: configuration.to_string(),
        config: ScoreConfig {
            idf: use_idf,
            provider: provider.name().to_string(),
            seeds: seeds.to_vec(),
        },
        precision: collect(|r| r.precision),
        recall: collect(|r| r.recall),
        f1: collect(|r| r.f1),
        runs,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, ScoreError> {
    Ok(read_jsonl_values(path)?.into_iter().map(|(_, p)| p).collect())
}

/// Loads predictions and the reference corpus and scores them.
pub fn corpus_score_files(
    predictions: &Path,
    references: &Path,
    provider: &dyn EmbeddingProvider,
    seeds: &[u64],
    use_idf: bool,
    model: &str,
    configuration: &str,
) -> Result<ScoreReport, ScoreError> {
    let preds = read_predictions(predictions)?;
    let refs = read_jsonl(references)?;
    corpus_score(&preds, &refs, provider, seeds, use_idf, model, configuration)
}

/// One row of the score CSV: `model,configuration,P,R,F1,stddev`. Scores
/// are fractions; empty cells are allowed for P, R and stddev.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub configuration: String,
    #[serde(rename = "P")]
    pub precision: Option<f64>,
    #[serde(rename = "R")]
    pub recall: Option<f64>,
    #[serde(rename = "F1")]
    pub f1: Option<f64>,
    pub stddev: Option<f64>,
}

pub fn write_score_csv(rows: &[ScoreRow]) -> Result<String, ScoreError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

pub fn read_score_csv(text: &str) -> Result<Vec<ScoreRow>, ScoreError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for row in rdr.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Model × configuration table of F1 percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub caption: String,
    pub configurations: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

const MISSING: &str = "—";

fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl ComparisonTable {
    /// Models and configurations appear in first-seen order. A repeated
    /// (model, configuration) keeps the last value.
    pub fn from_rows(rows: &[ScoreRow], caption: &str) -> Result<Self, ScoreError> {
        let mut configurations: Vec<String> = Vec::new();
        let mut models: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for r in rows {
            let c = position_or_push(&mut configurations, &r.configuration);
            let m = position_or_push(&mut models, &r.model);
            if let Some(f1) = r.f1 {
                cells.insert((m, c), f1);
            }
        }
        if models.is_empty() || configurations.len() < 2 {
            return Err(ScoreError::TooFewColumns {
                models: models.len(),
                configurations: configurations.len(),
            });
        }
        let rows = models
            .into_iter()
            .enumerate()
            .map(|(m, name)| {
                let values = (0..configurations.len()).map(|c| cells.get(&(m, c)).copied()).collect();
                (name, values)
            })
            .collect();
        Ok(Self {
            caption: caption.to_string(),
            configurations,
            rows,
        })
    }

    /// Rendered cell strings (two decimals, percent scale), "—" when missing.
    pub fn cell_text(&self, row: usize, column: usize) -> String {
        self.rows[row].1[column].map(percent).unwrap_or_else(|| MISSING.to_string())
    }

    fn column_max(&self, column: usize) -> Option<String> {
        self.rows
            .iter()
            .filter_map(|(_, v)| v[column])
            .max_by(|a, b| a.total_cmp(b))
            .map(percent)
    }

    /// Markdown table; each column's maximum is bold.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if !self.caption.is_empty() {
            let _ = writeln!(out, "{}\n", self.caption);
        }
        let _ = writeln!(out, "| Model | {} |", self.configurations.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(self.configurations.len()));
        let maxima: Vec<Option<String>> = (0..self.configurations.len()).map(|c| self.column_max(c)).collect();
        for (r, (model, _)) in self.rows.iter().enumerate() {
            let cells: Vec<String> = (0..self.configurations.len())
                .map(|c| {
                    let text = self.cell_text(r, c);
                    if maxima[c].as_deref() == Some(text.as_str()) {
                        format!("**{text}**")
                    } else {
                        text
                    }
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", model, cells.join(" | "));
        }
        out
    }

    pub fn render_csv(&self) -> Result<String, ScoreError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(self.configurations.iter().cloned());
        w.write_record(&header)?;
        for (r, (model, _)) in self.rows.iter().enumerate() {
            let mut record = vec![model.clone()];
            record.extend((0..self.configurations.len()).map(|c| self.cell_text(r, c)));
            w.write_record(&record)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
    }
}

fn position_or_push(list: &mut Vec<String>, value: &str) -> usize {
    match list.iter().position(|v| v == value) {
        Some(i) => i,
        None => {
            list.push(value.to_string());
            list.len() - 1
        }
    }
}

pub fn render_comparison(rows: &[ScoreRow], caption: &str) -> Result<ComparisonTable, ScoreError> {
    ComparisonTable::from_rows(rows, caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::DeterministicEmbedder;
    use crate::record::Source;

    fn toks(text: &str) -> TokenEmbeddings<f64> {
        let (t, v) = DeterministicEmbedder.embed_tokens(text, 0).unwrap();
        TokenEmbeddings::new(t, v)
    }

    fn basis(dim: usize, axes: &[usize]) -> TokenEmbeddings<f64> {
        let vectors = axes
            .iter()
            .map(|&a| {
                let mut v = vec![0.0; dim];
                v[a] = 1.0;
                Embedding::from_unit(v).unwrap()
            })
            .collect();
        TokenEmbeddings::new(axes.iter().map(|a| format!("t{a}")).collect(), vectors)
    }

    #[test]
    fn identity_scores_one() {
        let a = toks("عندك التهاب في الحلق ويجب شرب السوائل");
        let s = pair_score(&a, &a, None);
        assert!((s.precision - 1.0).abs() < 1e-9);
        assert!((s.recall - 1.0).abs() < 1e-9);
        assert!((s.f1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_scores_zero() {
        let s = pair_score(&basis(4, &[0, 1]), &basis(4, &[2, 3]), None);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_side_is_flagged() {
        let s = pair_score(&basis(4, &[]), &basis(4, &[2]), None);
        assert!(s.empty);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn partial_overlap_by_hand() {
        // candidate {e0, e1}, reference {e0, e2, e3}: P = (1 + 0)/2, R = (1 + 0 + 0)/3
        let s = pair_score(&basis(4, &[0, 1]), &basis(4, &[0, 2, 3]), None);
        assert!((s.precision - 0.5).abs() < 1e-15);
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn idf_weights_by_hand() {
        let docs = [vec!["a".to_string(), "b".to_string()], vec!["a".to_string()]];
        let idf = IdfWeights::from_documents(docs.iter().map(Vec::as_slice));
        assert!((idf.weight("a") - (3.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((idf.weight("b") - (3.0f64 / 2.0).ln()).abs() < 1e-15);
        assert!((idf.weight("zzz") - 3.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn idf_weighted_recall() {
        // reference tokens t0 (weight ln 3/2) matched, t2 (weight ln 3) unmatched
        let docs = [vec!["t0".to_string()], vec!["x".to_string()]];
        let idf = IdfWeights::from_documents(docs.iter().map(Vec::as_slice));
        let s = pair_score(&basis(4, &[0]), &basis(4, &[0, 2]), Some(&idf));
        let w0 = (3.0f64 / 2.0).ln();
        let w2 = 3.0f64.ln();
        assert!((s.recall - w0 / (w0 + w2)).abs() < 1e-12);
        assert!((s.precision - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f32_scores_close_to_f64() {
        let a = toks("الم في الصدر عند التنفس");
        let b = toks("الم شديد في الصدر");
        let cast = |t: &TokenEmbeddings<f64>| TokenEmbeddings::new(t.tokens.clone(), t.vectors.iter().map(|v| v.cast::<f32>()).collect());
        let s64 = pair_score(&a, &b, None);
        let s32 = pair_score(&cast(&a), &cast(&b), None);
        assert!((s64.f1 - s32.f1 as f64).abs() < 1e-5);
    }

    fn refs() -> Vec<QARecord> {
        vec![
            QARecord::new("سؤال اول", "اشرب الماء وارتح", Source::Real),
            QARecord::new("سؤال ثاني", "راجع طبيب الصدرية", Source::Real),
        ]
    }

    #[test]
    fn corpus_score_deterministic_has_zero_stddev() {
        let r = refs();
        let preds = vec![
            Prediction {
                id: r[0].id.clone(),
                output_text: "اشرب الماء".into(),
            },
            Prediction {
                id: r[1].id.clone(),
                output_text: "راجع الطبيب".into(),
            },
        ];
        let rep = corpus_score(&preds, &r, &DeterministicEmbedder, &[1, 2, 3], false, "m", "c").unwrap();
        assert_eq!(rep.f1.stddev, 0.0);
        assert_eq!(rep.runs.len(), 3);

        let mut reversed = preds.clone();
        reversed.reverse();
        let rep2 = corpus_score(&reversed, &r, &DeterministicEmbedder, &[1, 2, 3], false, "m", "c").unwrap();
        assert_eq!(rep, rep2);
    }

    #[test]
    fn single_pair_aggregate_equals_pair() {
        let r = refs();
        let preds = vec![Prediction {
            id: r[0].id.clone(),
            output_text: "اشرب الماء".into(),
        }];
        let rep = corpus_score(&preds, &r, &DeterministicEmbedder, &[7], false, "m", "c").unwrap();
        let direct = pair_score(&toks("اشرب الماء"), &toks(&r[0].answer), None);
        assert_eq!(rep.f1.mean, direct.f1);
        assert_eq!(rep.precision.mean, direct.precision);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let preds = vec![Prediction {
            id: "ffffffffffffffff".into(),
            output_text: "x".into(),
        }];
        assert!(matches!(
            corpus_score(&preds, &refs(), &DeterministicEmbedder, &[1], false, "m", "c"),
            Err(ScoreError::MissingReference(_))
        ));
    }

    fn row(model: &str, config: &str, f1: f64) -> ScoreRow {
        ScoreRow {
            model: model.into(),
            configuration: config.into(),
            precision: None,
            recall: None,
            f1: Some(f1),
            stddev: None,
        }
    }

    #[test]
    fn single_model_two_configs() {
        let t = render_comparison(&[row("m", "base", 0.5), row("m", "tuned", 0.6)], "").unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.render_text().contains("| m | **50.00** | **60.00** |"));
        assert!(render_comparison(&[row("m", "base", 0.5)], "").is_err());
    }

    #[test]
    fn missing_cell_renders_dash_and_maxima_bold() {
        let t = render_comparison(&[row("a", "x", 0.5), row("a", "y", 0.7), row("b", "x", 0.6)], "cap").unwrap();
        assert_eq!(t.cell_text(1, 1), "—");
        let text = t.render_text();
        assert!(text.contains("| a | 50.00 | **70.00** |"), "{text}");
        assert!(text.contains("| b | **60.00** | — |"), "{text}");
        let csv = t.render_csv().unwrap();
        assert_eq!(csv, "model,x,y\na,50.00,70.00\nb,60.00,—\n");
    }

    #[test]
    fn score_csv_round_trip() {
        let rows = vec![
            ScoreRow {
                model: "m".into(),
                configuration: "c".into(),
                precision: Some(0.5),
                recall: Some(0.25),
                f1: Some(1.0 / 3.0),
                stddev: Some(0.0),
            },
            row("n", "c", 0.8136),
        ];
        let text = write_score_csv(&rows).unwrap();
        assert!(text.starts_with("model,configuration,P,R,F1,stddev\n"));
        assert_eq!(read_score_csv(&text).unwrap(), rows);
    }
}
