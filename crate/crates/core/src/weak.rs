//! Query-prediction pretraining data built from click logs: a click query
//! becomes a pseudo-keyphrase when it occurs verbatim in the document.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::dataset::IngestedDocument;
use crate::doc::{match_tokens, tokenize, truncate, Document, Span, SpanTarget};
use crate::error::{Error, Result};

pub const CLICK_QUERY_SOURCE: &str = "click_queries";

/// One click-log line: `{"id": str, "queries": [str...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryLogRecord {
    pub id: String,
    pub queries: Vec<String>,
    /// Click counts aligned with `queries`; read but not used for weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clicks: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryMatch {
    pub query: String,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub matched: Vec<QueryMatch>,
    pub unmatched: Vec<String>,
    pub too_long: Vec<String>,
}

impl FilterOutcome {
    pub fn positives(&self) -> Vec<Span> {
        self.matched.iter().flat_map(|m| m.spans.iter().copied()).collect()
    }
}

/// Keeps a query iff its tokens occur contiguously in `document` and it is
/// at most `max_ngram` tokens long.
pub fn filter_queries(document: &Document, queries: &[String], max_ngram: usize) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for query in queries {
        let tokens = tokenize(query);
        if tokens.is_empty() {
            out.unmatched.push(query.clone());
            continue;
        }
        if tokens.len() > max_ngram {
            out.too_long.push(query.clone());
            continue;
        }
        match match_tokens(document, &tokens, max_ngram) {
            Ok(spans) if !spans.is_empty() => out.matched.push(QueryMatch {
                query: query.clone(),
                spans,
            }),
            _ => out.unmatched.push(query.clone()),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPredictionExample {
    pub document: Document,
    pub queries: Vec<String>,
    pub target: SpanTarget,
}

impl QueryPredictionExample {
    pub fn to_record(&self) -> DatasetRecord {
        let mut rec = DatasetRecord::from_document(&self.document, Some(self.queries.clone()));
        rec.source = Some(CLICK_QUERY_SOURCE.to_string());
        rec
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Dataset statistics in the layout of the published query-prediction table,
/// plus build counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QpStats {
    #[serde(rename = "Doc Length")]
    pub doc_length: MeanStd,
    #[serde(rename = "# of Query per Doc")]
    pub queries_per_doc: MeanStd,
    #[serde(rename = "Query Length")]
    pub query_length: MeanStd,
    #[serde(rename = "Doc Vocabulary Size")]
    pub doc_vocabulary: usize,
    #[serde(rename = "Query Vocabulary Size")]
    pub query_vocabulary: usize,
    #[serde(rename = "# of Documents")]
    pub documents: usize,
    #[serde(rename = "# of Unique Queries")]
    pub unique_queries: usize,
    pub excluded_no_match: usize,
    pub queries_unmatched: usize,
    pub queries_too_long: usize,
    pub queries_blocked: usize,
    /// Log ids with no document in the corpus.
    pub missing_documents: Vec<String>,
}

pub fn read_blocklist(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| tokenize(l).join(" "))
        .filter(|l| !l.is_empty())
        .collect())
}

/// One example per document with at least one matching query, ordered by id.
/// Queries are merged across log lines and deduplicated by exact string.
pub fn build_qp_dataset(
    logs: &[QueryLogRecord],
    docs: &[IngestedDocument],
    max_ngram: usize,
    max_len: usize,
    blocklist: Option<&HashSet<String>>,
) -> (Vec<QueryPredictionExample>, QpStats) {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.document.id.as_str(), &d.document)).collect();
    let mut merged: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for rec in logs {
        let entry = merged.entry(rec.id.as_str()).or_default();
        entry.extend(rec.queries.iter().map(String::as_str).filter(|q| !q.trim().is_empty()));
    }

    let mut stats = QpStats::default();
    let mut examples = Vec::new();
    let mut doc_vocab = HashSet::new();
    let mut query_vocab = HashSet::new();
    let mut unique_queries = HashSet::new();
    let (mut doc_lengths, mut per_doc, mut query_lengths) = (Vec::new(), Vec::new(), Vec::new());

    for (id, queries) in merged {
        let Some(&full) = by_id.get(id) else {
            stats.missing_documents.push(id.to_string());
            continue;
        };
        let mut kept = Vec::new();
        for q in queries {
            if blocklist.is_some_and(|b| b.contains(&tokenize(q).join(" "))) {
                stats.queries_blocked += 1;
            } else {
                kept.push(q.to_string());
            }
        }
        let document = truncate(full, max_len);
        let outcome = filter_queries(&document, &kept, max_ngram);
        stats.queries_unmatched += outcome.unmatched.len();
        stats.queries_too_long += outcome.too_long.len();
        if outcome.matched.is_empty() {
            stats.excluded_no_match += 1;
            continue;
        }
        let target = SpanTarget::from_positives(document.len(), max_ngram, outcome.positives())
            .expect("matched spans lie inside the document");
        doc_lengths.push(full.len() as f64);
        per_doc.push(outcome.matched.len() as f64);
        doc_vocab.extend(full.tokens.iter().cloned());
        for m in &outcome.matched {
            let tokens = tokenize(&m.query);
            query_lengths.push(tokens.len() as f64);
            unique_queries.insert(tokens.join(" "));
            query_vocab.extend(tokens);
        }
        examples.push(QueryPredictionExample {
            document: full.clone(),
            queries: outcome.matched.into_iter().map(|m| m.query).collect(),
            target,
        });
    }
    stats.doc_length = MeanStd::of(&doc_lengths);
    stats.queries_per_doc = MeanStd::of(&per_doc);
    stats.query_length = MeanStd::of(&query_lengths);
    stats.doc_vocabulary = doc_vocab.len();
    stats.query_vocabulary = query_vocab.len();
    stats.documents = examples.len();
    stats.unique_queries = unique_queries.len();
    (examples, stats)
}
