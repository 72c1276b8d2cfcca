//! Unsupervised reference rankers over the same candidate spans as the
//! neural model: TF-IDF and TextRank.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doc::{enumerate_spans, is_punctuation, Document, Span};
use crate::error::{Error, Result};
use crate::eval::Prediction;

const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as",
    "at", "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "further",
    "had", "has", "have", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his",
    "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my",
    "myself", "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our",
    "ours", "ourselves", "out", "over", "own", "same", "she", "should", "so", "some", "such", "than",
    "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this",
    "those", "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what",
    "when", "where", "which", "while", "who", "whom", "why", "will", "with", "would", "you", "your",
    "yours", "yourself", "yourselves",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self(ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl Stopwords {
    pub fn empty() -> Self {
        Self(HashSet::new())
    }

    /// One lowercase token per line; blank lines ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        ))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    /// Neither a stopword nor punctuation.
    pub fn is_candidate_word(&self, token: &str) -> bool {
        !self.contains(token) && !is_punctuation(token)
    }
}

/// Drops spans that start or end with a stopword or contain punctuation.
pub fn candidate_filter(spans: &[Span], doc: &Document, stopwords: &Stopwords) -> Vec<Span> {
    spans
        .iter()
        .copied()
        .filter(|s| {
            let toks = &doc.tokens[s.start..s.end()];
            !toks.iter().any(|t| is_punctuation(t))
                && !stopwords.contains(&toks[0])
                && !stopwords.contains(&toks[toks.len() - 1])
        })
        .collect()
}

pub fn candidate_spans(doc: &Document, max_ngram: usize, stopwords: &Stopwords) -> Vec<Span> {
    candidate_filter(&enumerate_spans(doc.len(), max_ngram), doc, stopwords)
}

/// Scores closer than this rank as ties.
pub const SCORE_RESOLUTION: f64 = 1e-12;

/// Ranks candidate spans by `score`, best first, collapsing repeated
/// phrases; ties go to the earlier first occurrence, then the shorter span.
/// Scores are compared at [`SCORE_RESOLUTION`] so that sums of equal terms
/// computed in different orders still tie.
pub fn rank_candidates(doc: &Document, spans: &[Span], score: impl Fn(Span) -> f64) -> Prediction {
    let mut best: HashMap<String, (f64, Span)> = HashMap::new();
    for &span in spans {
        let phrase = doc.phrase(span);
        let s = score(span);
        best.entry(phrase)
            .and_modify(|e| {
                if s > e.0 {
                    e.0 = s;
                }
                if span < e.1 {
                    e.1 = span;
                }
            })
            .or_insert((s, span));
    }
    let mut ranked: Vec<(String, f64, Span)> = best.into_iter().map(|(p, (s, sp))| (p, s, sp)).collect();
    let key = |s: f64| (s / SCORE_RESOLUTION).round();
    ranked.sort_by(|a, b| key(b.1).total_cmp(&key(a.1)).then(a.2.cmp(&b.2)));
    Prediction {
        phrases: ranked.into_iter().map(|(p, s, _)| (p, s)).collect(),
    }
}

/// Document count and per-token document frequency.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub df: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn build(docs: &[Document]) -> Self {
        let df = docs
            .par_iter()
            .fold(HashMap::new, |mut acc: HashMap<String, usize>, d| {
                let unique: HashSet<&String> = d.tokens.iter().collect();
                for t in unique {
                    *acc.entry(t.clone()).or_default() += 1;
                }
                acc
            })
            .reduce(HashMap::new, |mut a, b| {
                for (k, v) in b {
                    *a.entry(k).or_default() += v;
                }
                a
            });
        Self {
            documents: docs.len(),
            df,
        }
    }

    /// `ln((N+1)/(df+1)) + 1`; unseen tokens have `df = 0`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((self.documents as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }
}

/// Mean of `tf·idf` over the span's tokens, with `tf` the raw count
/// divided by document length.
pub fn tfidf_score(span: Span, doc: &Document, stats: &CorpusStats) -> f64 {
    let counts = token_counts(doc);
    tfidf_with_counts(span, doc, stats, &counts)
}

fn token_counts(doc: &Document) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for t in &doc.tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    counts
}

fn tfidf_with_counts(span: Span, doc: &Document, stats: &CorpusStats, counts: &HashMap<&str, usize>) -> f64 {
    let n = doc.len() as f64;
    let toks = &doc.tokens[span.start..span.end()];
    toks.iter()
        .map(|t| counts[t.as_str()] as f64 / n * stats.idf(t))
        .sum::<f64>()
        / toks.len() as f64
}

pub fn tfidf_rank(doc: &Document, stats: &CorpusStats, max_ngram: usize, stopwords: &Stopwords) -> Prediction {
    let counts = token_counts(doc);
    let spans = candidate_spans(doc, max_ngram, stopwords);
    rank_candidates(doc, &spans, |s| tfidf_with_counts(s, doc, stats, &counts))
}

/// Undirected weighted graph over word types; no self-loops.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordGraph {
    nodes: BTreeMap<String, BTreeMap<String, f64>>,
}

impl WordGraph {
    pub fn add_node(&mut self, word: &str) {
        self.nodes.entry(word.to_string()).or_default();
    }

    /// Adds `weight` to the symmetric edge; self-loops are ignored.
    pub fn add_edge(&mut self, a: &str, b: &str, weight: f64) {
        if a == b {
            self.add_node(a);
            return;
        }
        *self.nodes.entry(a.to_string()).or_default().entry(b.to_string()).or_default() += weight;
        *self.nodes.entry(b.to_string()).or_default().entry(a.to_string()).or_default() += weight;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight(&self, a: &str, b: &str) -> f64 {
        self.nodes.get(a).and_then(|n| n.get(b)).copied().unwrap_or(0.0)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    /// Co-occurrence graph: candidate words at distance below `window` in
    /// the original token sequence are linked.
    pub fn cooccurrence(doc: &Document, window: usize, stopwords: &Stopwords) -> Self {
        let mut g = Self::default();
        let toks = &doc.tokens;
        for i in 0..toks.len() {
            if !stopwords.is_candidate_word(&toks[i]) {
                continue;
            }
            g.add_node(&toks[i]);
            for j in i + 1..(i + window).min(toks.len()) {
                if stopwords.is_candidate_word(&toks[j]) {
                    g.add_edge(&toks[i], &toks[j], 1.0);
                }
            }
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRankConfig {
    pub window: usize,
    pub damping: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for TextRankConfig {
    fn default() -> Self {
        Self {
            window: 2,
            damping: 0.85,
            tolerance: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextRankScores {
    pub scores: BTreeMap<String, f64>,
    pub iterations: usize,
    /// L1 change of the final iteration.
    pub residual: f64,
}

/// Power iteration of `S(v) = (1−d) + d·Σ_u w_uv / W_u · S(u)` from all-ones.
pub fn pagerank(graph: &WordGraph, config: &TextRankConfig) -> TextRankScores {
    let words: Vec<&str> = graph.words().collect();
    let index: HashMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let adjacency: Vec<Vec<(usize, f64)>> = words
        .iter()
        .map(|w| graph.nodes[*w].iter().map(|(u, &wt)| (index[u.as_str()], wt)).collect())
        .collect();
    let out_weight: Vec<f64> = adjacency.iter().map(|a| a.iter().map(|e| e.1).sum()).collect();
    let d = config.damping;
    let mut scores = vec![1.0; words.len()];
    let mut residual = if words.is_empty() { 0.0 } else { f64::INFINITY };
    let mut iterations = 0;
    while iterations < config.max_iter && residual >= config.tolerance {
        let next: Vec<f64> = adjacency
            .iter()
            .map(|neigh| {
                (1.0 - d)
                    + d * neigh
                        .iter()
                        .map(|&(u, w)| w / out_weight[u] * scores[u])
                        .sum::<f64>()
            })
            .collect();
        residual = next.iter().zip(&scores).map(|(a, b)| (a - b).abs()).sum();
        scores = next;
        iterations += 1;
    }
    TextRankScores {
        scores: words.iter().map(|w| w.to_string()).zip(scores).collect(),
        iterations,
        residual,
    }
}

pub fn textrank_scores(doc: &Document, config: &TextRankConfig, stopwords: &Stopwords) -> TextRankScores {
    pagerank(&WordGraph::cooccurrence(doc, config.window, stopwords), config)
}

/// Span score is the sum of its words' scores.
pub fn textrank_rank(doc: &Document, config: &TextRankConfig, max_ngram: usize, stopwords: &Stopwords) -> Prediction {
    let scores = textrank_scores(doc, config, stopwords);
    if scores.scores.is_empty() {
        return Prediction::default();
    }
    let spans = candidate_spans(doc, max_ngram, stopwords);
    rank_candidates(doc, &spans, |s| {
        doc.tokens[s.start..s.end()]
            .iter()
            .map(|t| scores.scores.get(t).copied().unwrap_or(0.0))
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> Document {
        Document::from_text(id, text).unwrap()
    }

    #[test]
    fn candidate_rules() {
        let d = doc("d", "the stapler , protein synthesis");
        let sw = Stopwords::default();
        let kept: Vec<String> = candidate_spans(&d, 5, &sw).into_iter().map(|s| d.phrase(s)).collect();
        assert!(!kept.contains(&"the stapler".to_string()));
        assert!(kept.contains(&"protein synthesis".to_string()));
        assert!(kept.iter().all(|p| !p.contains(',')));
    }

    #[test]
    fn hand_computed_tfidf() {
        let a = doc("a", "a b a");
        let other = doc("o", "a c");
        let stats = CorpusStats::build(&[a.clone(), other]);
        let sw = Stopwords(HashSet::new());
        assert_abs_diff_eq!(tfidf_score(Span::new(0, 1), &a, &stats), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            tfidf_score(Span::new(1, 1), &a, &stats),
            (1.0 / 3.0) * ((3.0f64 / 2.0).ln() + 1.0),
            epsilon = 1e-15
        );
        let ranked = tfidf_rank(&a, &stats, 1, &sw);
        assert_eq!(ranked.phrases[0].0, "a");
        assert_eq!(ranked.phrases.len(), 2);
        assert_eq!(stats.idf("zzz"), 3f64.ln() + 1.0);
    }

    #[test]
    fn duplication_can_reorder_mixed_spans() {
        // Smoothed idf does not scale uniformly when N and df double, so
        // span means mixing rare and common tokens can swap places.
        let docs = vec![doc("0", "w2"), doc("1", "w4"), doc("2", "w2 w4 w2 w0 w5")];
        let doubled: Vec<Document> = docs.iter().chain(docs.iter()).cloned().collect();
        let target = &docs[2];
        let (s1, s2) = (CorpusStats::build(&docs), CorpusStats::build(&doubled));
        let a = Span::new(0, 3);
        let b = Span::new(2, 2);
        assert!(tfidf_score(a, target, &s1) > tfidf_score(b, target, &s1));
        assert!(tfidf_score(a, target, &s2) < tfidf_score(b, target, &s2));
    }

    #[test]
    fn idf_of_ubiquitous_token_is_one() {
        let docs = [doc("1", "x y"), doc("2", "x"), doc("3", "x z")];
        assert_eq!(CorpusStats::build(&docs).idf("x"), 1.0);
    }

    #[test]
    fn symmetric_cycle_scores_are_equal() {
        let mut g = WordGraph::default();
        g.add_edge("x", "y", 1.0);
        g.add_edge("y", "z", 1.0);
        g.add_edge("z", "x", 1.0);
        let r = pagerank(&g, &TextRankConfig::default());
        let vals: Vec<f64> = r.scores.values().copied().collect();
        assert_abs_diff_eq!(vals[0], vals[1], epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], vals[2], epsilon = 1e-12);
        assert!(r.residual < 1e-8);
    }

    #[test]
    fn star_center_outranks_leaves() {
        let mut g = WordGraph::default();
        for leaf in ["l1", "l2", "l3"] {
            g.add_edge("c", leaf, 1.0);
        }
        let r = pagerank(&g, &TextRankConfig::default());
        // closed form: C = 0.15 + 2.55 L, L = 0.15 + 0.85 C / 3
        let center = 0.5325 / 0.2775;
        let leaf = 0.15 + 0.85 * center / 3.0;
        assert_abs_diff_eq!(r.scores["c"], center, epsilon = 1e-7);
        assert_abs_diff_eq!(r.scores["l1"], leaf, epsilon = 1e-7);
        assert!(r.scores["c"] > r.scores["l2"]);
    }

    #[test]
    fn cooccurrence_skips_stopwords_and_self_loops() {
        let d = doc("d", "cheap cheap flights to paris");
        let g = WordGraph::cooccurrence(&d, 2, &Stopwords::default());
        assert_eq!(g.weight("cheap", "flights"), 1.0);
        assert_eq!(g.weight("cheap", "cheap"), 0.0);
        assert_eq!(g.weight("flights", "paris"), 0.0);
        assert_eq!(g.len(), 3);
        let empty = textrank_rank(&doc("e", "the of and"), &TextRankConfig::default(), 5, &Stopwords::default());
        assert!(empty.phrases.is_empty());
    }

    proptest! {
        #[test]
        fn idf_order_survives_corpus_duplication(
            docs in prop::collection::vec(prop::collection::vec(0u8..8, 1..12), 1..5),
        ) {
            let docs: Vec<Document> = docs
                .iter()
                .enumerate()
                .map(|(i, d)| doc(&i.to_string(), &d.iter().map(|x| format!("w{x}")).collect::<Vec<_>>().join(" ")))
                .collect();
            let doubled: Vec<Document> = docs.iter().chain(docs.iter()).cloned().collect();
            let s1 = CorpusStats::build(&docs);
            let s2 = CorpusStats::build(&doubled);
            let words: Vec<String> = (0..9).map(|x| format!("w{x}")).collect();
            for a in &words {
                prop_assert_eq!(s2.df.get(a).copied().unwrap_or(0), 2 * s1.df.get(a).copied().unwrap_or(0));
                for b in &words {
                    prop_assert_eq!(s1.idf(a) < s1.idf(b), s2.idf(a) < s2.idf(b));
                }
            }
        }

        #[test]
        fn textrank_positive_and_order_independent(
            edges in prop::collection::vec((0u8..6, 0u8..6, 1u8..4), 1..15),
        ) {
            let mut a = WordGraph::default();
            let mut b = WordGraph::default();
            for &(x, y, w) in &edges {
                a.add_edge(&format!("n{x}"), &format!("n{y}"), w as f64);
            }
            for &(x, y, w) in edges.iter().rev() {
                b.add_edge(&format!("n{y}"), &format!("n{x}"), w as f64);
            }
            let ra = pagerank(&a, &TextRankConfig::default());
            let rb = pagerank(&b, &TextRankConfig::default());
            prop_assert!(ra.scores.values().all(|&s| s > 0.0));
            for (k, v) in &ra.scores {
                prop_assert!((v - rb.scores[k]).abs() < 1e-12);
            }
        }
    }
}
