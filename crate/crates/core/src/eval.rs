//! Ranked phrase prediction, chunked inference for long documents,
//! ranking metrics, annotator agreement and paired significance testing.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::doc::{tokenize, Document, Span};
use crate::error::{Error, Result};
use crate::model::{SpanDistribution, SpanModel};

/// Weight of chunk `p` is `CHUNK_DECAY^p`.
pub const CHUNK_DECAY: f64 = 0.9;
pub const DEFAULT_CHUNK_LEN: usize = 256;

/// Lowercases, splits like the tokenizer and joins with single spaces;
/// optionally stems every token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhraseNormalizer {
    pub stem: bool,
}

impl PhraseNormalizer {
    pub fn normalize(&self, phrase: &str) -> String {
        let tokens = tokenize(phrase);
        if self.stem {
            let stemmer = Stemmer::create(Algorithm::English);
            tokens
                .iter()
                .map(|t| stemmer.stem(t).into_owned())
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            tokens.join(" ")
        }
    }
}

/// Ranked, duplicate-free phrases with non-increasing scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub phrases: Vec<(String, f64)>,
}

impl Prediction {
    pub fn phrases(&self) -> Vec<String> {
        self.phrases.iter().map(|(p, _)| p.clone()).collect()
    }

    pub fn truncated(mut self, k: usize) -> Self {
        self.phrases.truncate(k);
        self
    }
}

/// One line of a predictions file: `{"id": str, "phrases": [[str, score]...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub phrases: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
struct RankedPhrase {
    phrase: String,
    score: f64,
    span: Span,
}

/// Every unmasked span, best first (ties: earlier start, then shorter),
/// with repeated phrases collapsed onto their best occurrence.
fn rank_spans(dist: &SpanDistribution, doc: &Document) -> Vec<RankedPhrase> {
    let mut order: Vec<usize> = (0..dist.spans.len()).filter(|&i| dist.mask[i]).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b]
            .total_cmp(&dist.probs[a])
            .then(dist.spans[a].start.cmp(&dist.spans[b].start))
            .then(dist.spans[a].len.cmp(&dist.spans[b].len))
    });
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in order {
        let phrase = doc.phrase(dist.spans[i]);
        if seen.insert(phrase.clone()) {
            out.push(RankedPhrase {
                phrase,
                score: dist.probs[i],
                span: dist.spans[i],
            });
        }
    }
    out
}

pub fn predict_topk(dist: &SpanDistribution, doc: &Document, k: usize) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::Config("prediction depth must be at least 1".into()));
    }
    if dist.n != doc.len() {
        return Err(Error::Shape(format!(
            "distribution covers {} tokens, document `{}` has {}",
            dist.n,
            doc.id,
            doc.len()
        )));
    }
    Ok(Prediction {
        phrases: rank_spans(dist, doc)
            .into_iter()
            .take(k)
            .map(|r| (r.phrase, r.score))
            .collect(),
    })
}

/// Top-`k` predictions for every document, in input order.
pub fn predict_all(model: &SpanModel, docs: &[Document], k: usize) -> Result<Vec<PredictionRecord>> {
    docs.par_iter()
        .map(|d| {
            let dist = model.distribution(d)?;
            Ok(PredictionRecord {
                id: d.id.clone(),
                phrases: predict_topk(&dist, d, k)?.phrases,
            })
        })
        .collect()
}

/// Per-phrase scores from each chunk: phrase → `[(chunk index, score)]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChunkScoreTable {
    pub entries: BTreeMap<String, Vec<(usize, f64)>>,
}

impl ChunkScoreTable {
    pub fn insert(&mut self, phrase: impl Into<String>, chunk: usize, score: f64) {
        self.entries.entry(phrase.into()).or_default().push((chunk, score));
    }
}

/// `Σ_p score_p · 0.9^p` for every phrase.
pub fn merge_chunk_scores(table: &ChunkScoreTable) -> BTreeMap<String, f64> {
    table
        .entries
        .iter()
        .map(|(phrase, scores)| {
            let total = scores
                .iter()
                .map(|&(p, s)| s * CHUNK_DECAY.powi(p as i32))
                .sum();
            (phrase.clone(), total)
        })
        .collect()
}

/// Splits `doc` into consecutive non-overlapping chunks, ranks each chunk
/// and merges phrase scores with geometric chunk weights. Ties are broken
/// by the earliest occurrence. Returns the top `k`.
pub fn chunk_and_merge(doc: &Document, model: &SpanModel, chunk_len: usize, k: usize) -> Result<Prediction> {
    if doc.is_empty() {
        return Err(Error::EmptyDocument(doc.id.clone()));
    }
    if chunk_len == 0 || k == 0 {
        return Err(Error::Config("chunk length and depth must be positive".into()));
    }
    let mut table = ChunkScoreTable::default();
    let mut first_seen: HashMap<String, (usize, usize)> = HashMap::new();
    for (p, start) in (0..doc.len()).step_by(chunk_len).enumerate() {
        let chunk = doc.slice(start, (start + chunk_len).min(doc.len()));
        let dist = model.distribution(&chunk)?;
        for r in rank_spans(&dist, &chunk) {
            let global = (start + r.span.start, r.span.len);
            first_seen
                .entry(r.phrase.clone())
                .and_modify(|g| *g = (*g).min(global))
                .or_insert(global);
            table.insert(r.phrase, p, r.score);
        }
    }
    let mut merged: Vec<(String, f64)> = merge_chunk_scores(&table).into_iter().collect();
    merged.sort_by(|a, b| b.1.total_cmp(&a.1).then(first_seen[&a.0].cmp(&first_seen[&b.0])));
    merged.truncate(k);
    Ok(Prediction { phrases: merged })
}

fn contains_contiguous(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Drops every phrase below the top quarter (`⌈len/4⌉` by rank) whose
/// tokens appear contiguously inside a top-quarter phrase.
pub fn dedup_substrings(ranked: &[(String, f64)]) -> Vec<(String, f64)> {
    let top = ranked.len().div_ceil(4);
    let top_tokens: Vec<Vec<String>> = ranked[..top].iter().map(|(p, _)| tokenize(p)).collect();
    ranked
        .iter()
        .enumerate()
        .filter(|(i, (phrase, _))| {
            if *i < top {
                return true;
            }
            let tokens = tokenize(phrase);
            !top_tokens.iter().any(|t| contains_contiguous(t, &tokens))
        })
        .map(|(_, entry)| entry.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentMetrics {
    pub id: String,
    /// Keyed by depth.
    pub precision: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub f1_depth: usize,
    pub f1: f64,
    pub documents: usize,
    pub excluded_empty_gold: usize,
    /// Gold documents with no prediction line; scored as all-miss.
    pub missing_predictions: usize,
    #[serde(skip)]
    pub per_document: Vec<DocumentMetrics>,
}

impl MetricReport {
    /// Text table with one row per depth.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8}{:>10}{:>10}\n", "depth", "P", "R");
        for (k, p) in &self.precision {
            out.push_str(&format!("@{:<7}{:>10.4}{:>10.4}\n", k, p, self.recall[k]));
        }
        out.push_str(&format!("F1@{:<5}{:>10.4}\n", self.f1_depth, self.f1));
        out.push_str(&format!("documents: {}\n", self.documents));
        out
    }
}

fn dedup_normalized(phrases: &[String], norm: &PhraseNormalizer) -> Vec<String> {
    let mut seen = HashSet::new();
    phrases
        .iter()
        .map(|p| norm.normalize(p))
        .filter(|p| !p.is_empty() && seen.insert(p.clone()))
        .collect()
}

fn hits_at(ranked: &[String], gold: &HashSet<String>, k: usize) -> usize {
    ranked.iter().take(k).filter(|p| gold.contains(*p)).count()
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Macro-averaged P@k, R@k and F1@`f1_depth` over documents with a
/// non-empty gold set. `P@k` always divides by `k`.
pub fn evaluate(
    predictions: &[(String, Vec<String>)],
    gold: &[(String, Vec<String>)],
    depths: &[usize],
    f1_depth: usize,
    normalizer: &PhraseNormalizer,
) -> Result<MetricReport> {
    if depths.contains(&0) || f1_depth == 0 {
        return Err(Error::Config("metric depths must be at least 1".into()));
    }
    let by_id: HashMap<&str, &Vec<String>> = predictions.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let mut report = MetricReport {
        precision: depths.iter().map(|&k| (k, 0.0)).collect(),
        recall: depths.iter().map(|&k| (k, 0.0)).collect(),
        f1_depth,
        f1: 0.0,
        documents: 0,
        excluded_empty_gold: 0,
        missing_predictions: 0,
        per_document: Vec::new(),
    };
    let empty = Vec::new();
    for (id, gold_phrases) in gold {
        let gold_set: HashSet<String> = dedup_normalized(gold_phrases, normalizer).into_iter().collect();
        if gold_set.is_empty() {
            report.excluded_empty_gold += 1;
            continue;
        }
        let predicted = by_id.get(id.as_str()).copied().unwrap_or_else(|| {
            report.missing_predictions += 1;
            &empty
        });
        let ranked = dedup_normalized(predicted, normalizer);
        let g = gold_set.len() as f64;
        let mut doc = DocumentMetrics {
            id: id.clone(),
            precision: BTreeMap::new(),
            recall: BTreeMap::new(),
            f1: 0.0,
        };
        for &k in depths {
            let h = hits_at(&ranked, &gold_set, k) as f64;
            doc.precision.insert(k, h / k as f64);
            doc.recall.insert(k, h / g);
        }
        let h = hits_at(&ranked, &gold_set, f1_depth) as f64;
        doc.f1 = harmonic(h / f1_depth as f64, h / g);
        report.documents += 1;
        report.per_document.push(doc);
    }
    if report.documents > 0 {
        let n = report.documents as f64;
        for &k in depths {
            let p: f64 = report.per_document.iter().map(|d| d.precision[&k]).sum();
            let r: f64 = report.per_document.iter().map(|d| d.recall[&k]).sum();
            report.precision.insert(k, p / n);
            report.recall.insert(k, r / n);
        }
        report.f1 = report.per_document.iter().map(|d| d.f1).sum::<f64>() / n;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementMode {
    Exact,
    Unigram,
}

impl std::str::FromStr for AgreementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "unigram" => Ok(Self::Unigram),
            other => Err(Error::Config(format!("unknown agreement mode `{other}`"))),
        }
    }
}

/// One annotated item: `{"id": str, "judges": [[phrase...]...]}`, each
/// judge's list ranked best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub judges: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Mean pairwise agreement in percent.
    pub percent: f64,
    pub pairs: usize,
    /// `(item id, judge index)` for lists shorter than the depth.
    pub short_lists: Vec<(String, usize)>,
}

/// Mean pairwise overlap between judges' top-`depth` lists. Exact mode
/// divides the shared phrase count by the depth (or the longer list when
/// both are short); unigram mode compares word sets and divides by the
/// smaller set.
pub fn judge_agreement(items: &[AnnotationRecord], depth: usize, mode: AgreementMode) -> Result<AgreementReport> {
    if depth == 0 {
        return Err(Error::Config("agreement depth must be at least 1".into()));
    }
    let norm = PhraseNormalizer::default();
    let mut total = 0.0;
    let mut pairs = 0;
    let mut short_lists = Vec::new();
    for item in items {
        if item.judges.len() < 2 {
            return Err(Error::Config(format!("item `{}` has fewer than two judges", item.id)));
        }
        let tops: Vec<Vec<String>> = item
            .judges
            .iter()
            .enumerate()
            .map(|(j, list)| {
                let top: Vec<String> = dedup_normalized(list, &norm).into_iter().take(depth).collect();
                if top.len() < depth {
                    short_lists.push((item.id.clone(), j));
                }
                top
            })
            .collect();
        for a in 0..tops.len() {
            for b in a + 1..tops.len() {
                let value = match mode {
                    AgreementMode::Exact => {
                        let denom = depth.min(tops[a].len().max(tops[b].len()));
                        let sa: HashSet<&String> = tops[a].iter().collect();
                        let shared = tops[b].iter().filter(|p| sa.contains(p)).count();
                        (denom > 0).then(|| shared as f64 / denom as f64)
                    }
                    AgreementMode::Unigram => {
                        let ua: HashSet<&str> = tops[a].iter().flat_map(|p| p.split(' ')).collect();
                        let ub: HashSet<&str> = tops[b].iter().flat_map(|p| p.split(' ')).collect();
                        let denom = ua.len().min(ub.len());
                        (denom > 0).then(|| ua.intersection(&ub).count() as f64 / denom as f64)
                    }
                };
                if let Some(v) = value {
                    total += v;
                    pairs += 1;
                }
            }
        }
    }
    Ok(AgreementReport {
        percent: if pairs == 0 { 0.0 } else { 100.0 * total / pairs as f64 },
        pairs,
        short_lists,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationOutcome {
    pub observed_mean_difference: f64,
    /// `None` when there are too few documents for the test.
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
    pub resamples: usize,
}

pub const MIN_PERMUTATION_DOCS: usize = 5;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Two-sided paired sign-flip permutation test on per-document scores.
pub fn permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<PermutationOutcome> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired scores differ in length: {} vs {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let observed = if n == 0 { 0.0 } else { diffs.iter().sum::<f64>() / n as f64 };
    if n < MIN_PERMUTATION_DOCS || resamples == 0 {
        return Ok(PermutationOutcome {
            observed_mean_difference: observed,
            p_value: None,
            significant: None,
            resamples,
        });
    }
    let threshold = observed.abs() - 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..resamples {
        let s: f64 = diffs.iter().map(|&d| if rng.gen::<bool>() { d } else { -d }).sum();
        if (s / n as f64).abs() >= threshold {
            extreme += 1;
        }
    }
    let p = (extreme + 1) as f64 / (resamples + 1) as f64;
    Ok(PermutationOutcome {
        observed_mean_difference: observed,
        p_value: Some(p),
        significant: Some(p < SIGNIFICANCE_LEVEL),
        resamples,
    })
}
